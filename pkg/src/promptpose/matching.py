"""Minimum-cost assignment of ground-truth instances to query groups.

The base optimum comes from scipy's linear sum assignment; a refinement pass
then fixes rows in order, committing each row to the smallest column index
that still permits an optimal completion, so ties always resolve to the
lexicographically smallest pair sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ContractError, InvalidInputError

_TIE_TOL = 1e-9


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]  # (gt index, group index), one per gt row
    cost: float


def _lap_value(cost):
    if cost.shape[0] == 0:
        return 0.0
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def hungarian(cost):
    """Minimum-total-cost injective assignment of rows to columns (m <= n)."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise InvalidInputError(f"cost must be a matrix, got shape {cost.shape}")
    m, n = cost.shape
    if m > n:
        raise ContractError(f"cannot assign {m} ground truths to only {n} groups")
    if np.isnan(cost).any():
        raise InvalidInputError("cost matrix contains NaN")
    if not np.isfinite(cost).all():
        raise InvalidInputError("cost matrix contains non-finite values")

    optimum = _lap_value(cost)
    tol = _TIE_TOL * max(1.0, abs(optimum))
    available = list(range(n))
    pairs = []
    running = 0.0
    for i in range(m):
        rest_rows = np.arange(i + 1, m)
        for j in available:
            fixed = running + cost[i, j]
            rest_cols = [c for c in available if c != j]
            remainder = _lap_value(cost[np.ix_(rest_rows, rest_cols)])
            if fixed + remainder <= optimum + tol:
                pairs.append((i, j))
                available.remove(j)
                running = fixed
                break
        else:  # pragma: no cover - the base optimum guarantees a hit
            raise ContractError("assignment refinement failed to reproduce the optimum")
    return Assignment(pairs, running)
