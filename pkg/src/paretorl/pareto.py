"""Dominance, batch-wise non-dominated selection and hypervolume.

All rewards are maximised.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import _kernels

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ParetoSet:
    indices: tuple[int, ...]

    @property
    def size(self) -> int:
        return len(self.indices)

    def mask(self, n: int) -> np.ndarray:
        m = np.zeros(n, dtype=bool)
        m[list(self.indices)] = True
        return m


def dominates(a, b) -> bool:
    """True iff ``a`` is >= ``b`` in every channel and > in at least one."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dominates: length mismatch {a.shape} vs {b.shape}")
    return bool(np.all(a >= b) and np.any(a > b))


def non_dominated_set(rewards) -> ParetoSet:
    """Rows of an (N, K) reward matrix that no other row dominates.

    Identical rows do not dominate each other, so duplicates on the front are
    all kept.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 2 or r.shape[0] < 1:
        raise ValueError(f"non_dominated_set: expected a non-empty (N, K) matrix, got {r.shape}")
    if not np.all(np.isfinite(r)):
        raise ValueError("non_dominated_set: reward matrix has non-finite entries")
    keep = _kernels.nondominated_mask(r)
    return ParetoSet(tuple(int(i) for i in np.flatnonzero(keep)))


def hypervolume(points, ref_point) -> float:
    """Measure of the union of boxes [ref_point, p] over ``points`` (K = 2 or 3).

    Points that are not >= ref_point in every channel are dropped with a warning.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    ref = np.asarray(ref_point, dtype=np.float64)
    if pts.size == 0:
        return 0.0
    if pts.shape[1] != ref.shape[0]:
        raise ValueError(f"hypervolume: points have {pts.shape[1]} channels, ref has {ref.shape[0]}")
    if pts.shape[1] not in (2, 3):
        raise ValueError(f"hypervolume supports K in (2, 3), got {pts.shape[1]}")
    below = np.any(pts < ref, axis=1)
    if below.any():
        log.warning("hypervolume: dropping %d point(s) below the reference point", int(below.sum()))
        pts = pts[~below]
    if pts.shape[0] == 0:
        return 0.0
    front = pts[_kernels.nondominated_mask(pts)]
    return _kernels.hypervolume_sweep(front, ref)
