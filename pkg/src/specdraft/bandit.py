"""UCB search over a fixed set of tree configurations.

Each draft-and-verify round is one bandit round. The reward is the negative
inverse speedup of the round::

    r = -(1 / n_committed + lambda_gamma * gamma / n_committed)

where ``lambda_gamma`` approximates the drafter/target per-token time ratio.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import InvalidInputError, InvalidStateError
from .tree import TreeConfig

DEFAULT_LAMBDA_UCB = 1.0
DEFAULT_LAMBDA_GAMMA = 0.05
DEFAULT_SMOOTHING = 0.9


def parse_arm_set(text: str) -> list[TreeConfig]:
    """Parse ``"3,3,2,1;3,2,2,1,1"`` into distinct tree configs."""
    arms = [TreeConfig.parse(part) for part in text.split(";") if part.strip()]
    if not arms:
        raise InvalidInputError("arm set is empty")
    if len(set(arms)) != len(arms):
        raise InvalidInputError("arm set contains duplicate configs")
    return arms


@dataclass
class BanditState:
    n_arms: int
    lambda_ucb: float = DEFAULT_LAMBDA_UCB
    lambda_gamma: float = DEFAULT_LAMBDA_GAMMA
    counts: list[int] = field(default_factory=list)
    reward_sums: list[float] = field(default_factory=list)
    t: int = 0

    def __post_init__(self):
        if not self.counts:
            self.counts = [0] * self.n_arms
        if not self.reward_sums:
            self.reward_sums = [0.0] * self.n_arms

    @property
    def means(self) -> list[float]:
        return [s / n if n else 0.0 for s, n in zip(self.reward_sums, self.counts)]

    def scores(self) -> list[float]:
        """UCB score per arm; untried arms score +inf."""
        out = []
        log_t = math.log(self.t) if self.t > 0 else 0.0
        for s, n in zip(self.reward_sums, self.counts):
            if n == 0:
                out.append(math.inf)
            else:
                out.append(s / n + self.lambda_ucb * math.sqrt(2.0 * log_t / n))
        return out


def select_arm(state: BanditState) -> int:
    """Lowest-index untried arm, else the UCB argmax (ties to the lowest index)."""
    if state.n_arms < 1:
        raise InvalidStateError("bandit has no arms")
    for k, n in enumerate(state.counts):
        if n == 0:
            return k
    scores = state.scores()
    return max(range(state.n_arms), key=lambda k: (scores[k], -k))


def update(state: BanditState, arm: int, reward: float) -> BanditState:
    if not 0 <= arm < state.n_arms:
        raise InvalidInputError(f"arm {arm} out of range for {state.n_arms} arms")
    state.counts[arm] += 1
    state.reward_sums[arm] += reward
    state.t += 1
    return state


def compute_reward(committed_tokens: int, gamma: int, lambda_gamma: float) -> float:
    if committed_tokens < 1:
        raise InvalidInputError("a round commits at least one token")
    if lambda_gamma < 0:
        raise InvalidInputError("lambda_gamma must be >= 0")
    return -(1.0 / committed_tokens + lambda_gamma * gamma / committed_tokens)


class LambdaGammaEstimator:
    """Exponentially weighted mean of per-round draft/target time ratios."""

    def __init__(self, smoothing: float = DEFAULT_SMOOTHING, fallback: float = DEFAULT_LAMBDA_GAMMA):
        if not 0.0 <= smoothing < 1.0:
            raise InvalidInputError("smoothing must lie in [0, 1)")
        self.smoothing = smoothing
        self.fallback = fallback
        self.estimate: float | None = None

    def observe(self, t_draft_per_token: float, t_target: float) -> float:
        if t_draft_per_token <= 0 or t_target <= 0:
            raise InvalidInputError("timings must be positive")
        ratio = t_draft_per_token / t_target
        if self.estimate is None:
            self.estimate = ratio
        else:
            self.estimate = self.smoothing * self.estimate + (1.0 - self.smoothing) * ratio
        return self.estimate

    @property
    def value(self) -> float:
        return self.fallback if self.estimate is None else self.estimate


def estimate_lambda_gamma(
    timings: Iterable[Sequence[float]], smoothing: float = DEFAULT_SMOOTHING
) -> float:
    """EWMA of ``t_draft_per_token / t_target`` over ``(t_draft_per_token, t_target)`` pairs."""
    est = LambdaGammaEstimator(smoothing)
    for t_draft, t_target in timings:
        est.observe(t_draft, t_target)
    if est.estimate is None:
        raise InvalidInputError("need at least one timing measurement")
    return est.estimate


class UCBTreeSearch:
    """Per-query arm selection over tree configs."""

    def __init__(self, arms: Sequence[TreeConfig], lambda_ucb: float = DEFAULT_LAMBDA_UCB, lambda_gamma=DEFAULT_LAMBDA_GAMMA):
        if not arms:
            raise InvalidStateError("bandit has no arms")
        if len(set(arms)) != len(arms):
            raise InvalidInputError("arm set contains duplicate configs")
        self.arms = list(arms)
        self.auto_lambda = lambda_gamma == "auto"
        self.estimator = LambdaGammaEstimator()
        fixed = DEFAULT_LAMBDA_GAMMA if self.auto_lambda else float(lambda_gamma)
        self.state = BanditState(len(self.arms), lambda_ucb, fixed)

    @property
    def lambda_gamma(self) -> float:
        return self.estimator.value if self.auto_lambda else self.state.lambda_gamma

    def select(self) -> tuple[int, TreeConfig]:
        k = select_arm(self.state)
        return k, self.arms[k]

    def record(self, arm: int, committed_tokens: int, t_draft_per_token: float = 0.0, t_target: float = 0.0) -> float:
        if self.auto_lambda and t_draft_per_token > 0 and t_target > 0:
            self.estimator.observe(t_draft_per_token, t_target)
        reward = compute_reward(committed_tokens, self.arms[arm].gamma, self.lambda_gamma)
        update(self.state, arm, reward)
        return reward
