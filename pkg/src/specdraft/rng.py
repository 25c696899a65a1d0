"""Named, position-keyed random streams.

Every stream is addressed by the master seed plus a tuple of integer keys,
so results never depend on the order in which streams are requested.
Per-node streams are counter based (a keyed BLAKE2b hash of the draw index):
creating one costs about a microsecond, which matters when a tree round
opens dozens of them.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

# stream tags
DRAFT = 0xD7A1
VERIFY = 0x7E71
RUN = 0x5EED

_MASK32 = 0xFFFFFFFF


def _words(*keys: int) -> list[int]:
    words: list[int] = []
    for k in keys:
        k = int(k)
        if k < 0:
            raise ValueError("stream keys must be non-negative")
        # 64-bit keys are split so SeedSequence sees every bit
        words.extend((k & _MASK32, (k >> 32) & _MASK32))
    return words


class KeyedStream:
    """Uniform stream whose i-th draw is a hash of (key, i)."""

    __slots__ = ("_key", "_count")

    def __init__(self, seed: int, *keys: int):
        words = _words(seed, *keys)
        self._key = hashlib.blake2b(struct.pack(f"<{len(words)}I", *words), digest_size=32).digest()
        self._count = 0

    def random(self) -> float:
        """Next uniform on [0, 1) with 53 random bits."""
        digest = hashlib.blake2b(self._count.to_bytes(8, "little"), digest_size=8, key=self._key).digest()
        self._count += 1
        return (int.from_bytes(digest, "little") >> 11) * (1.0 / (1 << 53))


def stream(seed: int, *keys: int) -> KeyedStream:
    return KeyedStream(seed, *keys)


def derive_seed(seed: int, *keys: int) -> int:
    """Hash (seed, keys...) to a 63-bit child seed."""
    ss = np.random.SeedSequence(_words(seed, *keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


class RoundStreams:
    """Streams for one generation session.

    Drafting uses one stream per tree node, keyed by (round, depth, node);
    verification uses one stream per round.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def draft(self, round_idx: int, depth: int, node: int) -> KeyedStream:
        return stream(self.seed, DRAFT, round_idx, depth, node)

    def verify(self, round_idx: int) -> KeyedStream:
        return stream(self.seed, VERIFY, round_idx)


def sample_index(probs: np.ndarray, u: float) -> int:
    """Inverse-CDF draw from (possibly unnormalised) ``probs`` with one uniform ``u``.

    Zero-mass entries are never returned.
    """
    cdf = np.cumsum(probs)
    total = cdf[-1]
    idx = int(np.searchsorted(cdf, u * total, side="right"))
    if idx >= len(cdf):
        # u*total rounding up to total: fall back to the last positive entry
        idx = int(np.flatnonzero(probs > 0)[-1])
    return idx
