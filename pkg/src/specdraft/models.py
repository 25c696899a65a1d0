"""Target and drafter models.

Two desk-scale model families share one interface:

* :class:`TabularModel` -- an exact n-gram table, used both as a target and as
  a drafter whenever the output distribution has to be checked by enumeration.
* :class:`SsmDrafter` -- a diagonal linear-recurrence drafter whose state has
  a fixed size no matter how many tokens it has absorbed.

Both expose ``init_state``/``distribution``/``step`` on a :class:`DrafterState`
plus a batched ``step_batch`` used by tree drafting, and ``score`` for target
verification passes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import InvalidArgumentError, InvalidInputError, ModelFormatError

FORMAT_VERSION = 1
ROW_SUM_TOLERANCE = 1e-6


def check_tokens(tokens: Sequence[int], vocab_size: int) -> None:
    if len(tokens) <= 16:
        for t in tokens:
            if not (0 <= int(t) < vocab_size) or int(t) != t:
                raise InvalidInputError(f"token id {t!r} outside vocabulary of size {vocab_size}")
        return
    arr = np.asarray(tokens)
    if arr.size == 0:
        return
    if arr.dtype.kind in "iuf":
        bad = (arr < 0) | (arr >= vocab_size) | (arr != np.floor(arr))
        if not bad.any():
            return
        t = arr.ravel()[np.flatnonzero(bad.ravel())[0]].item()
        raise InvalidInputError(f"token id {t!r} outside vocabulary of size {vocab_size}")
    for t in tokens:
        if not (0 <= int(t) < vocab_size) or int(t) != t:
            raise InvalidInputError(f"token id {t!r} outside vocabulary of size {vocab_size}")


def normalize(probs: np.ndarray) -> np.ndarray:
    return probs / probs.sum(axis=-1, keepdims=True)


def as_distribution(probs: Sequence[float], tol: float = 1e-9) -> np.ndarray:
    """Validate a probability vector and return it as a float64 array."""
    arr = np.asarray(probs, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidInputError("a distribution must be a non-empty 1-d vector")
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise InvalidInputError("distribution has negative or non-finite entries")
    if abs(arr.sum() - 1.0) > tol:
        raise InvalidInputError(f"distribution sums to {arr.sum():.12g}, not 1")
    return arr


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class DrafterState:
    """Recurrent drafter state. ``payload`` is read-only; stepping returns a new state."""

    payload: np.ndarray
    position: int

    @property
    def nbytes(self) -> int:
        return self.payload.nbytes

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DrafterState):
            return NotImplemented
        return (
            self.position == other.position
            and self.payload.dtype == other.payload.dtype
            and np.array_equal(self.payload, other.payload)
        )


def duplicate_state(state: DrafterState, copies: int) -> list[DrafterState]:
    """Return ``copies`` independent copies of ``state``.

    The work is one payload copy per clone, so it does not depend on how many
    tokens the state has absorbed.
    """
    if copies < 1:
        raise InvalidArgumentError("copies must be >= 1")
    return [DrafterState(_frozen(state.payload.copy()), state.position) for _ in range(copies)]


class TabularModel:
    """Dense n-gram model over ``vocab_size`` tokens.

    A context is the last ``order - 1`` tokens, left-padded with the reserved
    id ``bos = vocab_size``. Rows are stored in row-major order over the
    padded context, oldest token most significant.
    """

    kind = "tabular"

    def __init__(self, vocab_size: int, order: int, table: np.ndarray, temperature: float = 1.0):
        if vocab_size < 1:
            raise ModelFormatError("vocab_size must be >= 1")
        if order < 1:
            raise ModelFormatError("order must be >= 1")
        if not temperature > 0:
            raise ModelFormatError("temperature must be > 0; greedy decoding is a verification mode")
        table = np.array(table, dtype=np.float64)
        n_rows = (vocab_size + 1) ** (order - 1)
        if table.shape != (n_rows, vocab_size):
            raise ModelFormatError(
                f"table must have shape ({n_rows}, {vocab_size}), got {table.shape}"
            )
        if np.any(table < 0) or not np.all(np.isfinite(table)):
            raise ModelFormatError("table has negative or non-finite entries")
        sums = table.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > ROW_SUM_TOLERANCE)
        if bad.size:
            raise ModelFormatError(f"row {bad[0]} sums to {sums[bad[0]]:.12g}, not 1")
        table = normalize(table)
        if temperature != 1.0:
            table = normalize(table ** (1.0 / temperature))
        self.vocab_size = int(vocab_size)
        self.order = int(order)
        self.temperature = float(temperature)
        self.table = _frozen(table)
        self.bos = self.vocab_size
        self.context_size = self.order - 1
        # an order-1 model still carries one (unused) payload slot
        self._payload_len = max(self.context_size, 1)
        self._weights = (self.vocab_size + 1) ** np.arange(self.context_size - 1, -1, -1)

    @classmethod
    def from_seed(
        cls, vocab_size: int, order: int, seed: int, concentration: float = 1.0, temperature: float = 1.0
    ) -> "TabularModel":
        """Dirichlet(concentration) rows drawn row-major from ``default_rng(seed)``."""
        if not concentration > 0:
            raise ModelFormatError("concentration must be > 0")
        rng = np.random.default_rng(seed)
        n_rows = (vocab_size + 1) ** (order - 1)
        table = rng.dirichlet(np.full(vocab_size, float(concentration)), size=n_rows)
        return cls(vocab_size, order, normalize(table), temperature)

    @property
    def n_rows(self) -> int:
        return self.table.shape[0]

    def context_of(self, tokens: Sequence[int]) -> tuple[int, ...]:
        if self.context_size == 0:
            return ()
        tail = [int(t) for t in tokens[-self.context_size :]] if len(tokens) else []
        return (self.bos,) * (self.context_size - len(tail)) + tuple(tail)

    def row_index(self, context: Sequence[int]) -> int:
        return int(np.dot(self._weights, context)) if self.context_size else 0

    def next_dist(self, tokens: Sequence[int]) -> np.ndarray:
        return self.table[self.row_index(self.context_of(tokens))]

    # drafter interface

    @property
    def state_size(self) -> int:
        return self._payload_len

    def init_state(self, prefix: Sequence[int], check: bool = True) -> DrafterState:
        if check:
            check_tokens(prefix, self.vocab_size)
        ctx = self.context_of(prefix) or (self.bos,)
        return DrafterState(_frozen(np.array(ctx, dtype=np.int64)), len(prefix))

    def distribution(self, state: DrafterState) -> np.ndarray:
        return self.table[self.row_index(state.payload) if self.context_size else 0]

    def step(self, state: DrafterState, token: int) -> tuple[DrafterState, np.ndarray]:
        check_tokens((token,), self.vocab_size)
        ctx = state.payload.copy()
        if self.context_size:
            ctx[:-1] = state.payload[1:]
            ctx[-1] = token
        new = DrafterState(_frozen(ctx), state.position + 1)
        return new, self.distribution(new)

    def empty_batch(self, batch: int) -> np.ndarray:
        return np.full((batch, self._payload_len), self.bos, dtype=np.int64)

    def load_batch(self, state: DrafterState, out: np.ndarray) -> None:
        out[0] = state.payload

    def step_batch(
        self,
        states: np.ndarray,
        parents: np.ndarray,
        tokens: np.ndarray,
        out_states: np.ndarray,
        out_probs: np.ndarray,
    ) -> None:
        """Advance ``states[parents[j]]`` by ``tokens[j]`` into row ``j`` of the outputs."""
        if self.context_size:
            np.take(states[:, 1:], parents, axis=0, out=out_states[:, :-1])
            out_states[:, -1] = tokens
            np.take(self.table, out_states @ self._weights, axis=0, out=out_probs)
        else:
            out_probs[:] = self.table[0]

    def batch_distributions(self, states: np.ndarray, out: np.ndarray) -> None:
        if self.context_size:
            np.take(self.table, states @ self._weights, axis=0, out=out)
        else:
            out[:] = self.table[0]

    # target interface

    def score(self, prefix: Sequence[int], candidates: Sequence[int]) -> list[np.ndarray]:
        # only the last context_size tokens of the prefix can matter
        k = self.context_size
        seq = (list(prefix[-k:]) if k else []) + list(candidates)
        n = len(seq) - len(candidates)
        return [self.next_dist(seq[: n + i]) for i in range(len(candidates) + 1)]

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": self.kind,
            "vocab_size": self.vocab_size,
            "order": self.order,
            "rows": [[float(x) for x in row] for row in self.table],
        }


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


class SsmDrafter:
    """Selective diagonal linear-recurrence drafter.

    Per token ``x``::

        h' = decay * h + sigmoid(gate[x]) * embedding[x]
        p(next | ...) = softmax(output @ h' / temperature)

    ``decay`` lies in [0, 1); a zero decay gives a memoryless drafter.
    """

    kind = "ssm"

    def __init__(
        self,
        embedding: np.ndarray,
        decay: np.ndarray,
        gate: np.ndarray,
        output: np.ndarray,
        temperature: float = 1.0,
    ):
        embedding = np.array(embedding, dtype=np.float64)
        gate = np.array(gate, dtype=np.float64)
        output = np.array(output, dtype=np.float64)
        decay = np.array(decay, dtype=np.float64)
        if embedding.ndim != 2:
            raise ModelFormatError("embedding must be (vocab_size, state_dim)")
        vocab_size, state_dim = embedding.shape
        if vocab_size < 1 or state_dim < 1:
            raise ModelFormatError("vocab_size and state_dim must be >= 1")
        if gate.shape != embedding.shape or output.shape != embedding.shape:
            raise ModelFormatError("gate and output must match embedding shape")
        if decay.shape != (state_dim,):
            raise ModelFormatError("decay must have length state_dim")
        if np.any(decay < 0) or np.any(decay >= 1):
            raise ModelFormatError("decay entries must lie in [0, 1)")
        if not temperature > 0:
            raise ModelFormatError("temperature must be > 0")
        for arr in (embedding, gate, output):
            if not np.all(np.isfinite(arr)):
                raise ModelFormatError("non-finite parameter")
        self.vocab_size = int(vocab_size)
        self.state_dim = int(state_dim)
        self.temperature = float(temperature)
        self.embedding = _frozen(embedding)
        self.decay = _frozen(decay)
        self.gate = _frozen(gate)
        self.output = _frozen(output)
        self._inject = _frozen(_sigmoid(gate) * embedding)
        self._readout = _frozen(output.T / self.temperature)

    @classmethod
    def from_seed(
        cls, vocab_size: int, state_dim: int, seed: int, scale: float = 1.0, temperature: float = 1.0
    ) -> "SsmDrafter":
        rng = np.random.default_rng(seed)
        embedding = rng.standard_normal((vocab_size, state_dim))
        decay = _sigmoid(rng.standard_normal(state_dim) + 1.0)
        gate = rng.standard_normal((vocab_size, state_dim))
        output = rng.standard_normal((vocab_size, state_dim)) * (scale / np.sqrt(state_dim))
        return cls(embedding, decay, gate, output, temperature)

    @property
    def state_size(self) -> int:
        return self.state_dim

    def init_state(self, prefix: Sequence[int], check: bool = True) -> DrafterState:
        if check:
            check_tokens(prefix, self.vocab_size)
        h = np.zeros(self.state_dim)
        for t in prefix:
            h = self.decay * h + self._inject[t]
        return DrafterState(_frozen(h), len(prefix))

    def distribution(self, state: DrafterState) -> np.ndarray:
        return _softmax(state.payload @ self._readout)

    def step(self, state: DrafterState, token: int) -> tuple[DrafterState, np.ndarray]:
        check_tokens((token,), self.vocab_size)
        h = self.decay * state.payload + self._inject[token]
        new = DrafterState(_frozen(h), state.position + 1)
        return new, self.distribution(new)

    def empty_batch(self, batch: int) -> np.ndarray:
        return np.empty((batch, self.state_dim))

    def load_batch(self, state: DrafterState, out: np.ndarray) -> None:
        out[0] = state.payload

    def step_batch(
        self,
        states: np.ndarray,
        parents: np.ndarray,
        tokens: np.ndarray,
        out_states: np.ndarray,
        out_probs: np.ndarray,
    ) -> None:
        np.take(states, parents, axis=0, out=out_states)
        out_states *= self.decay
        out_states += self._inject[tokens]
        np.matmul(out_states, self._readout, out=out_probs)
        out_probs -= out_probs.max(axis=1, keepdims=True)
        np.exp(out_probs, out=out_probs)
        out_probs /= out_probs.sum(axis=1, keepdims=True)

    def batch_distributions(self, states: np.ndarray, out: np.ndarray) -> None:
        np.matmul(states, self._readout, out=out)
        out[:] = _softmax(out)

    def score(self, prefix: Sequence[int], candidates: Sequence[int]) -> list[np.ndarray]:
        state = self.init_state(prefix)
        dists = [self.distribution(state)]
        for t in candidates:
            state, d = self.step(state, t)
            dists.append(d)
        return dists

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": self.kind,
            "vocab_size": self.vocab_size,
            "state_dim": self.state_dim,
            "temperature": self.temperature,
            "parameters": {
                "embedding": self.embedding.tolist(),
                "decay": self.decay.tolist(),
                "gate": self.gate.tolist(),
                "output": self.output.tolist(),
            },
        }


Model = Union[TabularModel, SsmDrafter]


def drafter_init(model: Model, prefix: Sequence[int]) -> DrafterState:
    return model.init_state(prefix)


def drafter_step(model: Model, state: DrafterState, token: int) -> tuple[DrafterState, np.ndarray]:
    return model.step(state, token)


def target_score_parallel(
    model: Model, prefix: Sequence[int], candidates: Sequence[int], check_prefix: bool = True
) -> list[np.ndarray]:
    """Target distributions after ``prefix + candidates[:i]`` for i = 0..len(candidates).

    One call is one target forward pass. ``check_prefix=False`` skips
    re-validating a prefix the caller has already checked.
    """
    if check_prefix:
        check_tokens(prefix, model.vocab_size)
    check_tokens(candidates, model.vocab_size)
    return model.score(prefix, candidates)


def greedy_decode(model: Model, prompt: Sequence[int], max_new_tokens: int, stop_tokens=()) -> list[int]:
    """Target-only greedy decoding; ties go to the lowest token id."""
    seq = list(prompt)
    out: list[int] = []
    for _ in range(max_new_tokens):
        tok = int(np.argmax(model.score(seq, [])[0]))
        out.append(tok)
        seq.append(tok)
        if tok in stop_tokens:
            break
    return out


def constant_beta_pair(beta: float, accept_size: int = 2, reject_size: int = 2) -> tuple[TabularModel, TabularModel]:
    """Unigram (target, drafter) pair with per-draft acceptance probability ``beta``.

    The target is uniform on the first ``accept_size`` tokens. The drafter puts
    mass ``beta`` there (in the same proportions) and ``1 - beta`` on
    ``reject_size`` tokens the target never emits, so sum(min(p, q)) = beta.
    """
    if not 0.0 < beta <= 1.0:
        raise InvalidArgumentError("beta must lie in (0, 1]")
    vocab = accept_size + reject_size
    p = np.zeros(vocab)
    p[:accept_size] = 1.0 / accept_size
    q = np.zeros(vocab)
    q[:accept_size] = beta / accept_size
    q[accept_size:] = (1.0 - beta) / reject_size
    if beta == 1.0:
        # keep every drafter entry positive so distinct siblings stay sampleable
        q = normalize(q + 1e-300)
    return TabularModel(vocab, 1, p[None, :]), TabularModel(vocab, 1, q[None, :])


def mixed_drafter(target: TabularModel, noise_weight: float, seed: int, concentration: float = 1.0) -> TabularModel:
    """Drafter table ``(1 - w) * target + w * Dirichlet noise``; rows strictly positive."""
    if not 0.0 <= noise_weight <= 1.0:
        raise InvalidArgumentError("noise_weight must lie in [0, 1]")
    noise = TabularModel.from_seed(target.vocab_size, target.order, seed, concentration).table
    table = (1.0 - noise_weight) * target.table + noise_weight * noise
    table = np.maximum(table, 1e-12)
    return TabularModel(target.vocab_size, target.order, normalize(table))


def _require(doc: dict, key: str):
    if key not in doc:
        raise ModelFormatError(f"model file missing field {key!r}")
    return doc[key]


def model_from_dict(doc: dict) -> Model:
    if not isinstance(doc, dict):
        raise ModelFormatError("model file must contain a JSON object")
    version = _require(doc, "format_version")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format_version {version!r}")
    kind = _require(doc, "kind")
    vocab_size = int(_require(doc, "vocab_size"))
    temperature = float(doc.get("temperature", 1.0))
    try:
        if kind == "tabular":
            order = int(_require(doc, "order"))
            if "rows" in doc:
                return TabularModel(vocab_size, order, np.asarray(doc["rows"], dtype=np.float64), temperature)
            return TabularModel.from_seed(
                vocab_size, order, int(_require(doc, "seed")), float(doc.get("concentration", 1.0)), temperature
            )
        if kind == "ssm":
            state_dim = int(_require(doc, "state_dim"))
            if "parameters" in doc:
                params = doc["parameters"]
                model = SsmDrafter(
                    params["embedding"], params["decay"], params["gate"], params["output"], temperature
                )
            else:
                model = SsmDrafter.from_seed(
                    vocab_size, state_dim, int(_require(doc, "seed")), float(doc.get("scale", 1.0)), temperature
                )
            if model.vocab_size != vocab_size or model.state_dim != state_dim:
                raise ModelFormatError("parameter shapes disagree with vocab_size/state_dim")
            return model
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"malformed {kind} model: {exc}") from exc
    raise ModelFormatError(f"unknown model kind {kind!r}")


def load_model(path: Union[str, Path]) -> Model:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ModelFormatError(f"cannot read model file {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"cannot parse model file {path}: {exc}") from exc
    return model_from_dict(doc)


def save_model(model: Model, path: Union[str, Path]) -> None:
    # json writes floats with repr(), i.e. 17 significant digits
    Path(path).write_text(json.dumps(model.to_dict()))
