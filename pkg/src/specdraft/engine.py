"""Draft -> score -> verify -> commit generation loop."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

from .bandit import DEFAULT_LAMBDA_GAMMA, DEFAULT_LAMBDA_UCB, UCBTreeSearch, parse_arm_set
from .errors import InvalidConfigError, InvalidInputError
from .models import DrafterState, Model, check_tokens, target_score_parallel
from .rng import RoundStreams, sample_index
from .tree import PlanCache, TreeConfig, draft_tree, target_score_tree, verify_tree
from .verify import DraftSequence, Mode, argmax, verify_sequential


@dataclass(frozen=True)
class Strategy:
    """How each round drafts: a sequential chain, one fixed tree, or a bandit over trees."""

    kind: str
    arms: tuple[TreeConfig, ...]
    lambda_ucb: float = DEFAULT_LAMBDA_UCB
    lambda_gamma: "float | str" = DEFAULT_LAMBDA_GAMMA

    def __post_init__(self):
        if self.kind not in ("seq", "tree", "bandit"):
            raise InvalidConfigError(f"unknown strategy kind {self.kind!r}")
        if not self.arms:
            raise InvalidConfigError("strategy needs at least one tree config")
        if self.kind != "bandit" and len(self.arms) != 1:
            raise InvalidConfigError(f"{self.kind} strategy takes exactly one config")
        if self.kind == "seq" and not self.arms[0].is_path:
            raise InvalidConfigError("sequential strategy needs a path config")
        if self.lambda_gamma != "auto" and float(self.lambda_gamma) < 0:
            raise InvalidConfigError("lambda_gamma must be >= 0 or 'auto'")

    @classmethod
    def sequential(cls, gamma: int) -> "Strategy":
        if gamma < 1:
            raise InvalidConfigError("draft length must be >= 1")
        return cls("seq", (TreeConfig.sequential(gamma),))

    @classmethod
    def tree(cls, config: "TreeConfig | str") -> "Strategy":
        if isinstance(config, str):
            config = TreeConfig.parse(config)
        return cls("tree", (config,))

    @classmethod
    def bandit(cls, arms, lambda_ucb: float = DEFAULT_LAMBDA_UCB, lambda_gamma="auto") -> "Strategy":
        if isinstance(arms, str):
            arms = parse_arm_set(arms)
        return cls("bandit", tuple(arms), float(lambda_ucb), lambda_gamma)

    @classmethod
    def parse(cls, text: str, lambda_ucb: float = DEFAULT_LAMBDA_UCB, lambda_gamma="auto") -> "Strategy":
        """Parse ``seq:5``, ``tree:3,2,2,1,1`` or ``bandit:3,3,2,1;3,2,2,1,1``."""
        kind, _, body = text.partition(":")
        try:
            if kind == "seq":
                return cls.sequential(int(body))
            if kind == "tree":
                return cls.tree(body)
            if kind == "bandit":
                return cls.bandit(body.strip("\"'"), lambda_ucb, lambda_gamma)
        except (ValueError, InvalidInputError) as exc:
            raise InvalidConfigError(f"cannot parse strategy {text!r}: {exc}") from exc
        raise InvalidConfigError(f"unknown strategy {text!r}")

    @property
    def max_gamma(self) -> int:
        return max(c.gamma for c in self.arms)

    def __str__(self) -> str:
        if self.kind == "seq":
            return f"seq:{self.arms[0].gamma}"
        if self.kind == "tree":
            return f"tree:{self.arms[0]}"
        return "bandit:" + ";".join(str(a) for a in self.arms)


@dataclass(frozen=True)
class GenerationConfig:
    strategy: Strategy
    mode: Mode = Mode.SAMPLING
    max_new_tokens: int = 64
    stop_tokens: tuple[int, ...] = ()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode.parse(self.mode))
        object.__setattr__(self, "stop_tokens", tuple(int(t) for t in self.stop_tokens))
        if self.max_new_tokens < 1:
            raise InvalidConfigError("max_new_tokens must be >= 1")


@dataclass
class RoundRecord:
    arm: int
    gamma: int
    committed: int  # tokens the verifier emitted this round (N_accept)
    appended: int  # tokens kept after max_new_tokens / stop truncation
    draft_time_s: float = 0.0
    verify_time_s: float = 0.0


@dataclass
class RunMetrics:
    committed_total: int = 0
    target_forward_passes: int = 0
    wall_time_s: float = 0.0
    draft_time_s: float = 0.0
    verify_time_s: float = 0.0
    rounds: list[RoundRecord] = field(default_factory=list)

    @property
    def acceptance_length(self) -> float:
        return self.committed_total / self.target_forward_passes if self.target_forward_passes else 0.0

    @property
    def throughput(self) -> float:
        return self.committed_total / self.wall_time_s if self.wall_time_s > 0 else 0.0

    def arm_counts(self, n_arms: int) -> list[int]:
        counts = [0] * n_arms
        for r in self.rounds:
            counts[r.arm] += 1
        return counts

    def to_dict(self) -> dict:
        return asdict(self)


def draft_sequential(
    drafter: Model,
    state: DrafterState,
    gamma: int,
    streams: RoundStreams,
    round_idx: int = 0,
    mode: "Mode | str" = Mode.SAMPLING,
) -> DraftSequence:
    """Draft ``gamma`` tokens one step at a time.

    Uses the same per-node streams as :func:`draft_tree`, so it reproduces a
    path-shaped tree exactly.
    """
    mode = Mode.parse(mode)
    q = drafter.distribution(state)
    tokens, dists = [], []
    for d in range(gamma):
        tok = argmax(q) if mode is Mode.GREEDY else sample_index(q, streams.draft(round_idx, d, 0).random())
        tokens.append(tok)
        dists.append(q)
        if d + 1 < gamma:
            state, q = drafter.step(state, tok)
    return DraftSequence.from_dists(tokens, dists)


def generate(
    target: Model,
    drafter: Model,
    prompt: Sequence[int],
    cfg: GenerationConfig,
    search: UCBTreeSearch | None = None,
) -> tuple[list[int], RunMetrics]:
    """Run speculative decoding for one prompt.

    Returns the generated tokens (prompt excluded) and run metrics. Output is
    a pure function of (models, prompt, cfg) unless the bandit uses an
    ``"auto"`` lambda_gamma, which feeds measured timings into arm selection.

    A bandit strategy starts from a fresh search per call; pass ``search`` to
    carry arm statistics over from earlier queries instead.
    """
    if target.vocab_size != drafter.vocab_size:
        raise InvalidInputError(
            f"target vocab {target.vocab_size} != drafter vocab {drafter.vocab_size}"
        )
    check_tokens(prompt, target.vocab_size)
    strategy = cfg.strategy
    if max(max(c.widths) for c in strategy.arms) > drafter.vocab_size:
        raise InvalidConfigError("a tree width exceeds the vocabulary size")

    streams = RoundStreams(cfg.seed)
    plans = PlanCache(drafter)
    if strategy.kind != "bandit":
        search = None
    elif search is None:
        search = UCBTreeSearch(strategy.arms, strategy.lambda_ucb, strategy.lambda_gamma)
    elif search.arms != list(strategy.arms):
        raise InvalidConfigError("carried-over bandit search has a different arm set")
    stops = set(cfg.stop_tokens)

    context = list(prompt)
    out: list[int] = []
    state = drafter.init_state(prompt)
    metrics = RunMetrics()
    start = time.perf_counter()
    round_idx = 0
    while len(out) < cfg.max_new_tokens:
        arm, config = search.select() if search else (0, strategy.arms[0])
        t0 = time.perf_counter()
        if strategy.kind == "seq":
            draft = draft_sequential(drafter, state, config.gamma, streams, round_idx, cfg.mode)
            t1 = time.perf_counter()
            dists = target_score_parallel(target, context, draft.tokens, check_prefix=False)
            outcome = verify_sequential(dists, draft, cfg.mode, streams.verify(round_idx))
        else:
            tree = draft_tree(drafter, state, config, plans.get(config), streams, round_idx, cfg.mode)
            t1 = time.perf_counter()
            dists = target_score_tree(target, context, tree, check_prefix=False)
            outcome = verify_tree(dists, tree, cfg.mode, streams.verify(round_idx))
        t2 = time.perf_counter()

        new = outcome.committed
        take = new[: cfg.max_new_tokens - len(out)]
        stopped = False
        for i, tok in enumerate(take):
            if tok in stops:
                take, stopped = take[: i + 1], True
                break
        out.extend(take)
        context.extend(take)
        # re-absorb from the pre-round state; speculative branches are dropped
        for tok in take:
            state, _ = drafter.step(state, tok)

        metrics.rounds.append(RoundRecord(arm, config.gamma, len(new), len(take), t1 - t0, t2 - t1))
        metrics.committed_total += len(take)
        metrics.target_forward_passes += 1
        metrics.draft_time_s += t1 - t0
        metrics.verify_time_s += t2 - t1
        if search:
            search.record(arm, len(new), (t1 - t0) / config.gamma, t2 - t1)
        round_idx += 1
        if stopped:
            break
    metrics.wall_time_s = time.perf_counter() - start
    return out, metrics
