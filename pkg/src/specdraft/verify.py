"""Draft verification by rejection sampling.

Random draws follow a fixed order so that every outcome can be enumerated:
one uniform per draft position visited, in draft order, then exactly one
uniform for the final (resampled or bonus) token, drawn by inverse CDF.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import InvalidInputError
from .rng import sample_index

RESIDUAL_ZERO_TOL = 1e-12


class Mode(str, Enum):
    GREEDY = "greedy"
    SAMPLING = "sampling"

    @classmethod
    def parse(cls, value: "str | Mode") -> "Mode":
        if isinstance(value, Mode):
            return value
        aliases = {"sample": cls.SAMPLING, "sampling": cls.SAMPLING, "greedy": cls.GREEDY}
        try:
            return aliases[value]
        except KeyError:
            raise InvalidInputError(f"unknown mode {value!r}") from None


@dataclass
class DraftSequence:
    tokens: list[int]
    q_probs: list[float]
    q_dists: list[np.ndarray]

    def __post_init__(self):
        n = len(self.tokens)
        if n < 1 or len(self.q_probs) != n or len(self.q_dists) != n:
            raise InvalidInputError("draft tokens, q_probs and q_dists must share a length >= 1")

    @property
    def gamma(self) -> int:
        return len(self.tokens)

    @classmethod
    def from_dists(cls, tokens: Sequence[int], q_dists: Sequence[np.ndarray]) -> "DraftSequence":
        tokens = [int(t) for t in tokens]
        return cls(tokens, [float(d[t]) for t, d in zip(tokens, q_dists)], list(q_dists))


@dataclass
class VerifyOutcome:
    committed: list[int]
    n_accepted_drafts: int
    used_bonus: bool
    # path of accepted node indices per depth (tree verification only)
    accepted_nodes: list[int] = field(default_factory=list)


def argmax(dist: np.ndarray) -> int:
    # np.argmax returns the first maximum, i.e. the lowest token id on ties
    return int(np.argmax(dist))


def residual_distribution(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """normalize(max(0, p - q)), or ``p`` itself when the positive part vanishes."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise InvalidInputError(f"distribution lengths differ: {p.shape} vs {q.shape}")
    diff = np.maximum(p - q, 0.0)
    total = diff.sum()
    if total <= RESIDUAL_ZERO_TOL:
        return p.copy()
    return diff / total


def accept_token(p_t: float, q_t: float, u: float) -> bool:
    """Accept iff ``u < min(1, p_t / q_t)``."""
    if not q_t > 0:
        raise InvalidInputError("draft token has zero drafter probability")
    return u < min(1.0, p_t / q_t)


def sample_from(dist: np.ndarray, rng) -> int:
    return sample_index(dist, rng.random())


def verify_sequential(
    target_dists: Sequence[np.ndarray], draft: DraftSequence, mode: "Mode | str", rng
) -> VerifyOutcome:
    """Verify a draft left to right against ``gamma + 1`` target distributions.

    ``rng`` only needs a ``random()`` method returning floats in [0, 1).
    """
    mode = Mode.parse(mode)
    gamma = draft.gamma
    if len(target_dists) != gamma + 1:
        raise InvalidInputError(f"expected {gamma + 1} target distributions, got {len(target_dists)}")
    vocab = len(target_dists[0])
    if any(len(p) != vocab for p in target_dists) or any(len(q) != vocab for q in draft.q_dists):
        raise InvalidInputError("target and drafter distributions must share a vocabulary")

    committed: list[int] = []
    for i, tok in enumerate(draft.tokens):
        p = target_dists[i]
        if mode is Mode.GREEDY:
            best = argmax(p)
            if tok == best:
                committed.append(tok)
                continue
            committed.append(best)
            return VerifyOutcome(committed, i, False)
        u = rng.random()
        if accept_token(float(p[tok]), draft.q_probs[i], u):
            committed.append(tok)
            continue
        committed.append(sample_from(residual_distribution(p, draft.q_dists[i]), rng))
        return VerifyOutcome(committed, i, False)

    tail = target_dists[gamma]
    bonus = argmax(tail) if mode is Mode.GREEDY else sample_from(tail, rng)
    committed.append(bonus)
    return VerifyOutcome(committed, gamma, True)
