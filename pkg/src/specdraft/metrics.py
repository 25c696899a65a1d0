"""Acceptance-length, speedup and calibration metrics."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidInputError
from .models import TabularModel
from .engine import RunMetrics


def acceptance_length_expectation(beta: float, gamma: int) -> float:
    """Expected tokens committed per round when each draft is accepted i.i.d. with prob ``beta``."""
    if not 0.0 <= beta <= 1.0:
        raise InvalidInputError("beta must lie in [0, 1]")
    if gamma < 1:
        raise InvalidInputError("gamma must be >= 1")
    if beta == 1.0:
        return float(gamma + 1)
    return 1.0 + beta * (1.0 - beta**gamma) / (1.0 - beta)


def round_speedup(n_accept: int, gamma: int, t_target: float, t_draft: float) -> float:
    """``n_accept * T_target / (T_target + gamma * T_draft)``, taking T_target(gamma) = T_target."""
    if t_target <= 0 or t_draft < 0:
        raise InvalidInputError("timings must be positive")
    return n_accept * t_target / (t_target + gamma * t_draft)


def speedup_estimate(metrics: RunMetrics, t_target_per_pass: float, t_draft_per_token: float) -> float:
    """Mean per-round speedup over a run."""
    if t_target_per_pass <= 0 or t_draft_per_token < 0:
        raise InvalidInputError("timings must be positive")
    if not metrics.rounds:
        raise InvalidInputError("run has no rounds")
    return float(
        np.mean(
            [round_speedup(r.committed, r.gamma, t_target_per_pass, t_draft_per_token) for r in metrics.rounds]
        )
    )


def expected_calibration_error(pairs: Iterable[tuple[float, bool]], bins: int = 10) -> float:
    """Binned ECE with ``bins`` equal-width confidence bins on [0, 1]."""
    if bins < 1:
        raise InvalidInputError("bins must be >= 1")
    data = list(pairs)
    if not data:
        raise InvalidInputError("no calibration pairs")
    conf = np.array([c for c, _ in data], dtype=np.float64)
    correct = np.array([bool(k) for _, k in data], dtype=np.float64)
    if np.any(conf < 0) or np.any(conf > 1):
        raise InvalidInputError("confidences must lie in [0, 1]")
    idx = np.minimum((conf * bins).astype(np.int64), bins - 1)
    ece = 0.0
    for b in np.unique(idx):
        mask = idx == b
        ece += mask.sum() / len(conf) * abs(correct[mask].mean() - conf[mask].mean())
    return float(ece)


def calibration_pairs(target: TabularModel, drafter: TabularModel, contexts: Sequence[Sequence[int]] | None = None):
    """(drafter top-1 probability, drafter top-1 == target top-1) per context.

    Defaults to every table row of the drafter when both models share an order.
    """
    if contexts is None:
        if target.order != drafter.order:
            raise InvalidInputError("explicit contexts needed when model orders differ")
        return [
            (float(q.max()), int(np.argmax(q)) == int(np.argmax(p)))
            for p, q in zip(target.table, drafter.table)
        ]
    out = []
    for ctx in contexts:
        p, q = target.next_dist(ctx), drafter.next_dist(ctx)
        out.append((float(q.max()), int(np.argmax(q)) == int(np.argmax(p))))
    return out
