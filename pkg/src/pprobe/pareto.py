"""Pareto dominance and frontier extraction (larger is better on every axis)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

ADD = "Add"
REMOVE = "Remove"


@dataclass(frozen=True)
class ObjectivePoint:
    values: tuple[float, ...]
    payload: Any = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if len(self.values) < 2:
            raise ValueError("need at least two objectives")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"non-finite objective values {self.values}")


def _vals(p) -> tuple[float, ...]:
    return p.values if isinstance(p, ObjectivePoint) else tuple(p)


def dominates(a, b) -> bool:
    """True iff ``a`` is at least as good on every axis and strictly better on one."""
    va, vb = _vals(a), _vals(b)
    if len(va) != len(vb):
        raise ValueError(f"dimension mismatch: {len(va)} vs {len(vb)}")
    strict = False
    for x, y in zip(va, vb):
        if x < y:
            return False
        if x > y:
            strict = True
    return strict


def frontier_mask(values, block: int = 512) -> np.ndarray:
    """Boolean mask of non-dominated rows of an (n, K) array.

    Candidates are compared against all rows in ``block``-row slabs, one axis
    at a time, so memory stays at ``block * n``.
    """
    v = np.asarray(values, dtype=np.float64)
    n = len(v)
    keep = np.ones(n, dtype=bool)
    for start in range(0, n, block):
        rows = v[start:start + block]
        ge = np.ones((len(rows), n), dtype=bool)
        gt = np.zeros((len(rows), n), dtype=bool)
        for j in range(v.shape[1]):
            col, cand = v[None, :, j], rows[:, j, None]
            ge &= col >= cand
            gt |= col > cand
        keep[start:start + block] = ~(ge & gt).any(axis=1)
    return keep


def pareto_frontier(points: Sequence) -> list:
    """The points not dominated by any other, in input order; equal points all survive."""
    points = list(points)
    if not points:
        return []
    dims = {len(_vals(p)) for p in points}
    if len(dims) != 1:
        raise ValueError(f"mixed objective dimensions {sorted(dims)}")
    mask = frontier_mask([_vals(p) for p in points])
    return [p for p, k in zip(points, mask) if k]


def orient(task_loss: float, probe_ce: float, mode: str, bleu: float | None = None, payload=None) -> ObjectivePoint:
    """Map a run to a maximisation point.

    Axis 1 is ``-task_loss`` (or BLEU when given).  Axis 2 is ``-probe_ce`` in
    Add mode (more information is better) and ``+probe_ce`` in Remove mode.
    """
    if mode not in (ADD, REMOVE):
        raise ValueError(f"mode must be {ADD} or {REMOVE}, got {mode!r}")
    axis1 = bleu if bleu is not None else -task_loss
    axis2 = -probe_ce if mode == ADD else probe_ce
    return ObjectivePoint((axis1, axis2), payload)
