"""Tree-structured drafting as batch generation over duplicated recurrent states.

A tree config ``(N_1, ..., N_gamma)`` expands every depth-(i-1) node into
``N_i`` children, so depth ``i`` holds ``B_i = N_1 * ... * N_i`` nodes. Nodes
are laid out depth-major: the children of node ``j`` at depth ``i-1`` are
``j*N_i .. (j+1)*N_i - 1`` at depth ``i``, in the order they were sampled.
Global node ids put the root at 0 followed by depth 1, depth 2, ...
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import accumulate
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError, InvalidConfigError, InvalidInputError
from .models import DrafterState, Model
from .rng import RoundStreams, sample_index
from .verify import (
    Mode,
    VerifyOutcome,
    accept_token,
    argmax,
    residual_distribution,
    sample_from,
)


@dataclass(frozen=True)
class TreeConfig:
    widths: tuple[int, ...]

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        if not widths:
            raise InvalidConfigError("a tree config needs at least one depth")
        if any(w < 1 for w in widths):
            raise InvalidConfigError(f"tree widths must be >= 1, got {widths}")
        object.__setattr__(self, "widths", widths)

    @classmethod
    def parse(cls, text: str) -> "TreeConfig":
        try:
            return cls(tuple(int(w) for w in text.split(",")))
        except ValueError:
            raise InvalidConfigError(f"cannot parse tree config {text!r}") from None

    @classmethod
    def sequential(cls, gamma: int) -> "TreeConfig":
        return cls((1,) * gamma)

    @property
    def gamma(self) -> int:
        return len(self.widths)

    @property
    def is_path(self) -> bool:
        return all(w == 1 for w in self.widths)

    def __str__(self) -> str:
        return ",".join(map(str, self.widths))


def batch_sizes(config: TreeConfig) -> tuple[int, ...]:
    return tuple(accumulate(config.widths, lambda a, b: a * b))


class StateCachePlan:
    """Preallocated per-depth buffers for one tree config.

    Depth ``i`` owns buffers for exactly ``B_i`` drafter states, their
    next-token distributions, sampled tokens and drafted probabilities.
    ``allocations`` counts buffer allocations; drafting never adds to it.
    """

    def __init__(self, config: TreeConfig, state_dim: int, vocab_size: int, dtype=np.float64):
        if state_dim < 1:
            raise InvalidArgumentError("state_dim must be >= 1")
        if vocab_size < 1:
            raise InvalidArgumentError("vocab_size must be >= 1")
        self.config = config
        self.state_dim = int(state_dim)
        self.vocab_size = int(vocab_size)
        self.dtype = np.dtype(dtype)
        self.batch_sizes = batch_sizes(config)
        self.allocations = 0
        self.root_states = self._alloc((1, state_dim), self.dtype)
        self.root_probs = self._alloc((1, vocab_size), np.float64)
        self.states, self.probs, self.tokens, self.q_probs, self.parents = [], [], [], [], []
        for width, size in zip(config.widths, self.batch_sizes):
            self.states.append(self._alloc((size, state_dim), self.dtype))
            self.probs.append(self._alloc((size, vocab_size), np.float64))
            self.tokens.append(self._alloc((size,), np.int64))
            self.q_probs.append(self._alloc((size,), np.float64))
            parents = self._alloc((size,), np.int64)
            parents[:] = np.arange(size) // width
            self.parents.append(parents)
        self.scratch = self._alloc((vocab_size,), np.float64)

    def _alloc(self, shape, dtype) -> np.ndarray:
        self.allocations += 1
        return np.zeros(shape, dtype=dtype)

    def buffer_addresses(self) -> list[int]:
        arrays = [self.root_states, self.root_probs, self.scratch]
        for group in (self.states, self.probs, self.tokens, self.q_probs, self.parents):
            arrays.extend(group)
        return [a.__array_interface__["data"][0] for a in arrays]


def build_cache_plan(config: TreeConfig, state_dim: int, vocab_size: int, dtype=np.float64) -> StateCachePlan:
    return StateCachePlan(config, state_dim, vocab_size, dtype)


def plan_for(drafter: Model, config: TreeConfig) -> StateCachePlan:
    return StateCachePlan(config, drafter.state_size, drafter.vocab_size, drafter.empty_batch(0).dtype)


class PlanCache:
    """One reusable plan per tree config."""

    def __init__(self, drafter: Model):
        self.drafter = drafter
        self._plans: dict[TreeConfig, StateCachePlan] = {}

    def get(self, config: TreeConfig) -> StateCachePlan:
        plan = self._plans.get(config)
        if plan is None:
            plan = self._plans[config] = plan_for(self.drafter, config)
        return plan

    def __len__(self) -> int:
        return len(self._plans)

    @property
    def allocations(self) -> int:
        return sum(p.allocations for p in self._plans.values())


@dataclass
class DraftTree:
    """Drafted candidate tree. Arrays are views into the plan's buffers and
    stay valid until the plan drafts again."""

    config: TreeConfig
    tokens: list[np.ndarray]
    q_probs: list[np.ndarray]
    parents: list[np.ndarray]
    # q_dists[d][j]: drafter next-token distribution at node j of depth d
    # (d = 0 is the root), which its depth-(d+1) children were drawn from
    q_dists: list[np.ndarray]

    @property
    def gamma(self) -> int:
        return self.config.gamma

    @property
    def batch_sizes(self) -> tuple[int, ...]:
        return batch_sizes(self.config)

    @property
    def n_nodes(self) -> int:
        return sum(self.batch_sizes)

    def offsets(self) -> list[int]:
        """Global id of the first node at each depth 1..gamma."""
        out, acc = [], 1
        for size in self.batch_sizes:
            out.append(acc)
            acc += size
        return out

    def children(self, depth: int, node: int) -> range:
        """Indices at ``depth + 1`` of the children of ``node`` at ``depth`` (root is depth 0)."""
        width = self.config.widths[depth]
        return range(node * width, (node + 1) * width)

    def node_q_dist(self, depth: int, node: int) -> np.ndarray:
        """Distribution the depth-``depth`` node ``node`` was sampled from (depth >= 1)."""
        return self.q_dists[depth - 1][self.parents[depth - 1][node]]

    def path_tokens(self, depth: int, node: int) -> list[int]:
        out = []
        while depth >= 1:
            out.append(int(self.tokens[depth - 1][node]))
            node = int(self.parents[depth - 1][node])
            depth -= 1
        return out[::-1]


def _pick_children(q: np.ndarray, width: int, mode: Mode, rng, scratch: np.ndarray, out_tokens, out_q) -> None:
    if mode is Mode.GREEDY:
        order = np.argsort(-q, kind="stable")[:width]
        out_tokens[:] = order
        out_q[:] = q[order]
        return
    scratch[:] = q
    for c in range(width):
        if not scratch.sum() > 0:
            raise InvalidConfigError(
                f"cannot draw {width} distinct siblings: drafter distribution has too few positive tokens"
            )
        tok = sample_index(scratch, rng.random())
        out_tokens[c] = tok
        out_q[c] = q[tok]
        scratch[tok] = 0.0


def draft_tree(
    drafter: Model,
    root_state: DrafterState,
    config: TreeConfig,
    plan: StateCachePlan,
    streams: RoundStreams,
    round_idx: int = 0,
    mode: "Mode | str" = Mode.SAMPLING,
) -> DraftTree:
    """Expand ``root_state`` level by level into a :class:`DraftTree`.

    Each depth duplicates every parent state ``N_i`` times and steps the whole
    batch once; siblings are drawn without replacement from the parent's
    next-token distribution using the parent's own stream
    ``(round_idx, depth, node)``. Greedy mode takes the top ``N_i`` tokens.
    """
    mode = Mode.parse(mode)
    if plan.config != config:
        raise InvalidConfigError("cache plan was built for a different tree config")
    if plan.state_dim != drafter.state_size or plan.vocab_size != drafter.vocab_size:
        raise InvalidConfigError("cache plan does not match the drafter")
    if max(config.widths) > drafter.vocab_size:
        raise InvalidConfigError(
            f"width {max(config.widths)} exceeds vocabulary size {drafter.vocab_size}"
        )

    drafter.load_batch(root_state, plan.root_states)
    drafter.batch_distributions(plan.root_states, plan.root_probs)
    prev_states, prev_probs = plan.root_states, plan.root_probs
    for d, width in enumerate(config.widths):
        tokens, q_probs = plan.tokens[d], plan.q_probs[d]
        for j in range(prev_probs.shape[0]):
            rng = streams.draft(round_idx, d, j) if mode is Mode.SAMPLING else None
            lo = j * width
            _pick_children(
                prev_probs[j], width, mode, rng, plan.scratch, tokens[lo : lo + width], q_probs[lo : lo + width]
            )
        drafter.step_batch(prev_states, plan.parents[d], tokens, plan.states[d], plan.probs[d])
        prev_states, prev_probs = plan.states[d], plan.probs[d]

    return DraftTree(
        config=config,
        tokens=plan.tokens,
        q_probs=plan.q_probs,
        parents=plan.parents,
        q_dists=[plan.root_probs] + plan.probs[:-1],
    )


@dataclass
class FlatTree:
    """Root-to-leaf candidate paths and the tree node behind every path slot."""

    paths: np.ndarray  # (B_gamma, gamma) tokens
    node_ids: np.ndarray  # (B_gamma, gamma) global node ids

    @property
    def n_distinct(self) -> int:
        return int(np.unique(self.node_ids).size)


def flatten_for_scoring(tree: DraftTree) -> FlatTree:
    gamma = tree.gamma
    offsets = tree.offsets()
    leaves = tree.batch_sizes[-1]
    paths = np.empty((leaves, gamma), dtype=np.int64)
    node_ids = np.empty((leaves, gamma), dtype=np.int64)
    idx = np.arange(leaves)
    for d in range(gamma - 1, -1, -1):
        paths[:, d] = tree.tokens[d][idx]
        node_ids[:, d] = offsets[d] + idx
        idx = tree.parents[d][idx]
    return FlatTree(paths, node_ids)


def target_score_tree(
    target: Model, prefix: Sequence[int], tree: DraftTree, check_prefix: bool = True
) -> np.ndarray:
    """Target next-token distributions for the root (row 0) and every tree node.

    Each distinct node is scored once; one call is one target forward pass.
    """
    root = target.init_state(prefix, check=check_prefix)
    rows = [target.distribution(root)]
    prev_states = [root]
    for d in range(tree.gamma):
        states = []
        for tok, parent in zip(tree.tokens[d], tree.parents[d]):
            state, dist = target.step(prev_states[parent], int(tok))
            states.append(state)
            rows.append(dist)
        prev_states = states
    return np.vstack(rows)


def verify_tree(target_dists: np.ndarray, tree: DraftTree, mode: "Mode | str", rng) -> VerifyOutcome:
    """Verify a draft tree against per-node target distributions.

    ``target_dists`` is indexed by global node id (root = 0). Sampling mode
    tries the children of each accepted node in their sampling order; a
    rejected child turns the target into its residual and removes the child
    from the drafter distribution before the next sibling is tried. Draws
    follow the same order as :func:`verify_sequential`, to which a path tree
    reduces exactly.
    """
    mode = Mode.parse(mode)
    target_dists = np.asarray(target_dists)
    n_nodes = tree.n_nodes
    if target_dists.ndim != 2 or target_dists.shape[0] != n_nodes + 1:
        raise InvalidInputError(
            f"expected {n_nodes + 1} node distributions (root + nodes), got {target_dists.shape[0]}"
        )
    vocab = target_dists.shape[1]
    if tree.q_dists[0].shape[1] != vocab:
        raise InvalidInputError("target and drafter distributions must share a vocabulary")

    offsets = tree.offsets()
    committed: list[int] = []
    path: list[int] = []
    gid, node = 0, 0
    for d in range(tree.gamma):
        p = target_dists[gid]
        kids = tree.children(d, node)
        tokens = tree.tokens[d]
        chosen = None
        if mode is Mode.GREEDY:
            best = argmax(p)
            chosen = next((k for k in kids if tokens[k] == best), None)
            if chosen is None:
                committed.append(best)
        else:
            q = tree.q_dists[d][node].copy()
            for k in kids:
                tok = int(tokens[k])
                if accept_token(float(p[tok]), float(q[tok]), rng.random()):
                    chosen = k
                    break
                p = residual_distribution(p, q)
                q[tok] = 0.0
                mass = q.sum()
                if mass > 0:
                    q /= mass
            if chosen is None:
                committed.append(sample_from(p, rng))
        if chosen is None:
            return VerifyOutcome(committed, d, False, path)
        committed.append(int(tokens[chosen]))
        path.append(chosen)
        node, gid = chosen, offsets[d] + chosen

    tail = target_dists[gid]
    committed.append(argmax(tail) if mode is Mode.GREEDY else sample_from(tail, rng))
    return VerifyOutcome(committed, tree.gamma, True, path)


def node_count(config: TreeConfig) -> int:
    return sum(batch_sizes(config))
