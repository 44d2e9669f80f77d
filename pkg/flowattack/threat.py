"""The l-inf feasible set around a clean input, intersected with the data range."""
from __future__ import annotations

import numpy as np

from .errors import DomainError, ShapeError

Bounds = tuple[float, float]


def project_linf(candidate: np.ndarray, anchor: np.ndarray, epsilon: float,
                 bounds: Bounds = (0.0, 1.0)) -> np.ndarray:
    """Project ``candidate`` onto {x : |x - anchor|_inf <= epsilon, lo <= x <= hi}.

    Works on a single input or a batch (leading axis) against one anchor. The result
    satisfies ``np.abs(out - anchor) <= epsilon`` exactly in float64.
    """
    cand = np.asarray(candidate, dtype=np.float64)
    anc = np.asarray(anchor, dtype=np.float64)
    if cand.ndim < anc.ndim or cand.shape[cand.ndim - anc.ndim:] != anc.shape:
        raise ShapeError("project_linf", cand.shape, anc.shape)
    if epsilon < 0:
        raise DomainError(f"project_linf: epsilon must be >= 0, got {epsilon}")
    lo, hi = bounds
    out = np.clip(cand, anc - epsilon, anc + epsilon)
    # rounding of anchor +- epsilon can leave a one-ulp excess
    for _ in range(4):
        over = np.abs(out - anc) > epsilon
        if not over.any():
            break
        out = np.where(over, np.nextafter(out, np.broadcast_to(anc, out.shape)), out)
    return np.clip(out, lo, hi)


def linf_distance(x: np.ndarray, anchor: np.ndarray) -> float:
    return float(np.max(np.abs(np.asarray(x, np.float64) - np.asarray(anchor, np.float64)), initial=0.0))


def is_feasible(x: np.ndarray, anchor: np.ndarray, epsilon: float, bounds: Bounds) -> bool:
    arr = np.asarray(x, dtype=np.float64)
    lo, hi = bounds
    return bool(linf_distance(arr, anchor) <= epsilon and arr.min() >= lo and arr.max() <= hi)
