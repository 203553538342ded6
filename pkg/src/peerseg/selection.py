"""Small-loss sample selection and the clean/noisy split.

Each epoch a remember rate gamma says how much of a sampled subset to
keep as high-quality data: gamma grows as min(t * (1 - beta) / T, 1 - beta)
so the kept fraction approaches the expected clean fraction, with a
small floor so early epochs never select an empty set. Within a batch
the kept samples are the gamma-fraction with the smallest per-sample
clean loss; within the kept set, samples whose loss exceeds a quantile
are flagged noisy (omega = 1) and routed through the noise-tolerant loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class SelectionError(ValueError):
    pass


@dataclass(frozen=True)
class RememberSchedule:
    beta: float
    total_epochs: int
    gamma0: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise SelectionError("beta must be in [0, 1)")
        if self.total_epochs < 1:
            raise SelectionError("total_epochs must be >= 1")
        if not 0.0 <= self.gamma0 <= 1.0:
            raise SelectionError("gamma0 must be in [0, 1]")


@dataclass(frozen=True)
class SelectionResult:
    ids: tuple            # selected sample ids, ascending loss order
    losses: tuple         # losses aligned with ids
    omegas: tuple         # 0 = clean route, 1 = noisy route (empty until split)

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "losses", tuple(float(x) for x in self.losses))
        object.__setattr__(self, "omegas", tuple(int(x) for x in self.omegas))

    def __len__(self):
        return len(self.ids)


def remember_rate(t: int, sched: RememberSchedule) -> float:
    """Remember rate at epoch t: the scheduled min(t(1-beta)/T, 1-beta),
    floored at gamma0 and never above 1 - beta."""
    if t < 1:
        raise SelectionError("epoch t must be >= 1")
    cap = 1.0 - sched.beta
    scheduled = min(t * cap / sched.total_epochs, cap)
    return min(max(sched.gamma0, scheduled), cap)


def select_small_loss(ids, per_sample_loss, gamma: float) -> SelectionResult:
    """Keep the ceil(gamma * N) smallest-loss samples.

    Ties break by id so the result is a pure function of the
    (id, loss) pairs regardless of batch order.
    """
    ids = list(ids)
    losses = [float(x) for x in per_sample_loss]
    if len(ids) == 0:
        raise SelectionError("empty batch")
    if len(ids) != len(losses):
        raise SelectionError("ids and losses must align")
    if not all(math.isfinite(x) for x in losses):
        raise SelectionError("non-finite per-sample loss")
    if not 0.0 < gamma <= 1.0:
        raise SelectionError("gamma must be in (0, 1]")
    k = math.ceil(gamma * len(ids))
    order = sorted(range(len(ids)), key=lambda i: (losses[i], ids[i]))
    keep = order[:k]
    return SelectionResult(
        ids=[ids[i] for i in keep],
        losses=[losses[i] for i in keep],
        omegas=[0] * k,
    )


def split_omega(selected: SelectionResult, tau: float) -> SelectionResult:
    """Flag selected samples whose loss strictly exceeds the nearest-rank
    tau-quantile of the selected losses as noisy (omega = 1)."""
    if not 0.0 < tau < 1.0:
        raise SelectionError("tau must be in (0, 1)")
    n = len(selected)
    if n == 0:
        return selected
    ranked = sorted(selected.losses)
    q = ranked[math.ceil(tau * n) - 1]
    omegas = [1 if loss > q else 0 for loss in selected.losses]
    return SelectionResult(selected.ids, selected.losses, omegas)


def selection_purity(selected_ids, corrupted_ids) -> float:
    """Fraction of a selection that is truly clean (planted-flag oracle)."""
    if not selected_ids:
        return float("nan")
    corrupted = set(corrupted_ids)
    clean = sum(1 for sid in selected_ids if sid not in corrupted)
    return clean / len(selected_ids)
