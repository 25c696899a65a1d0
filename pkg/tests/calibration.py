"""Synthetic drafter/target pairs with known calibration.

For every context the drafter row q is drawn from a Dirichlet, and the
target's top token is then sampled from q itself. The drafter's top-1
token agrees with the target's with probability exactly max(q), so its
confidence is calibrated by construction. Sharpening q (temperature < 1)
keeps the same top-1 token and agreement rate but raises the confidence,
giving an overconfident drafter on the same target.
"""

from __future__ import annotations

import numpy as np

from specdraft.models import TabularModel


def calibrated_and_sharpened(seed: int, vocab: int = 8, order: int = 4, temperature: float = 0.25):
    rng = np.random.default_rng(seed)
    n_rows = (vocab + 1) ** (order - 1)
    q = rng.dirichlet(np.full(vocab, 0.6), size=n_rows)
    top = np.array([rng.choice(vocab, p=row) for row in q])
    p = np.full((n_rows, vocab), 0.1 / (vocab - 1))
    p[np.arange(n_rows), top] = 0.9
    target = TabularModel(vocab, order, p)
    return target, TabularModel(vocab, order, q), TabularModel(vocab, order, q, temperature=temperature)
