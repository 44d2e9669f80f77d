"""Experiment metrics: query statistics, transfer rates, first-order flow checks and
perturbation correlation.

Query statistics follow the comparison convention of score-based attack tables: averages
and medians are taken only over inputs on which every compared variant succeeded.
Medians are lower medians, so medians of check-interval multiples stay multiples.
"""
from __future__ import annotations

import logging
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import pandas as pd

from . import diffcore as dc
from .attack import cw_loss
from .errors import ConditioningError, ContractError, ShapeError, VarianceError
from .flowmodel import FlowModel
from .records import AttackRecord, records_frame

logger = logging.getLogger(__name__)

EMPTY_MARKER = "<empty>"


@dataclass
class ExperimentReport:
    summary: pd.DataFrame
    common: list[int]
    records: pd.DataFrame

    @property
    def empty(self) -> bool:
        return not self.common

    def to_dict(self) -> dict[str, Any]:
        rows = {}
        for variant, row in self.summary.iterrows():
            rows[variant] = {k: (None if pd.isna(v) else v.item() if hasattr(v, "item") else v)
                             for k, v in row.items()}
        return {
            "variants": rows,
            "mutually_successful": self.common if self.common else EMPTY_MARKER,
            "n_mutually_successful": len(self.common),
        }

    def to_text(self) -> str:
        table = pd.DataFrame(index=self.summary.index)
        table["inputs"] = self.summary["n"]
        table["clean acc. (%)"] = self.summary["clean_accuracy"].map("{:.1f}".format)
        table["success (%)"] = self.summary["success_rate"].map("{:.1f}".format)
        table["success on correct (%)"] = self.summary["success_rate_correct"].map(
            lambda v: "n/a" if pd.isna(v) else f"{v:.1f}")
        if self.empty:
            table["avg. (median) queries"] = EMPTY_MARKER
        else:
            table["avg. (median) queries"] = [
                f"{m:.0f} ({int(md)})" for m, md in zip(self.summary["mean_queries"], self.summary["median_queries"])
            ]
        table.index.name = "variant"
        footer = f"\nmutually successful inputs: {len(self.common) if self.common else EMPTY_MARKER}\n"
        return table.to_string() + footer


def query_stats(results: Mapping[str, Sequence[AttackRecord]]) -> ExperimentReport:
    if not results:
        raise ContractError("query_stats needs at least one variant")
    index_sets = {v: sorted(r.index for r in recs) for v, recs in results.items()}
    reference = next(iter(index_sets.values()))
    for variant, idx in index_sets.items():
        if idx != reference:
            raise ContractError(f"variant {variant!r} ran on different inputs than the others")

    frame = records_frame(r for recs in results.values() for r in recs)
    successes = [set(frame.loc[(frame.variant == v) & frame.success, "index"]) for v in results]
    common = sorted(set.intersection(*successes)) if successes else []

    rows = []
    for variant in results:
        part = frame[frame.variant == variant]
        correct = part[part.correct]
        on_common = part[part["index"].isin(common)]["queries"]
        rows.append({
            "variant": variant,
            "n": len(part),
            "successes": int(part.success.sum()),
            "success_rate": 100.0 * part.success.mean() if len(part) else 0.0,
            "success_rate_correct": 100.0 * correct.success.mean() if len(correct) else np.nan,
            "clean_accuracy": 100.0 * part.correct.mean() if len(part) else 0.0,
            "mean_queries": float(on_common.mean()) if common else np.nan,
            "median_queries": float(on_common.quantile(0.5, interpolation="lower")) if common else np.nan,
        })
    summary = pd.DataFrame(rows).set_index("variant")
    logger.info("query statistics over %d variants, %d mutually successful inputs", len(rows), len(common))
    return ExperimentReport(summary, common, frame)


def success_curve(results: Mapping[str, Sequence[AttackRecord]], budgets: Sequence[int]) -> pd.DataFrame:
    """Percentage of inputs attacked successfully within each query budget."""
    curve = {}
    for variant, recs in results.items():
        queries = np.array([r.queries for r in recs if r.success])
        n = max(len(recs), 1)
        curve[variant] = [100.0 * np.sum(queries <= b) / n for b in budgets]
    frame = pd.DataFrame(curve, index=pd.Index(list(budgets), name="budget"))
    return frame


@dataclass(frozen=True, eq=False)
class TransferSource:
    """Adversaries crafted against one model; rows of failed attacks are ignored."""

    name: str
    x_adv: np.ndarray
    labels: np.ndarray
    success: np.ndarray


def transferability(sources: Sequence[TransferSource],
                    targets: Mapping[str, Callable[[np.ndarray], np.ndarray]]) -> pd.DataFrame:
    """Success rates (%) of each source's adversaries on each target's probabilities.

    Denominators count every attacked input of the source, failed attacks included.
    """
    matrix = pd.DataFrame(0.0, index=[s.name for s in sources], columns=list(targets))
    matrix.index.name = "source"
    for src in sources:
        n = len(src.labels)
        if n == 0:
            continue
        ok = np.asarray(src.success, dtype=bool)
        if not ok.any():
            continue
        for name, prob_fn in targets.items():
            fooled = cw_loss(prob_fn(src.x_adv[ok]), src.labels[ok]) == 0.0
            matrix.loc[src.name, name] = 100.0 * float(np.sum(fooled)) / n
    return matrix


def lemma1_check(flow: FlowModel, x: np.ndarray, direction: np.ndarray,
                 scales: Sequence[float] = (1e-1, 1e-2, 1e-3, 1e-4), step: float = 1e-4,
                 max_condition: float = 1e10) -> pd.DataFrame:
    """First-order accuracy of the latent perturbation map around ``x``.

    For each scale t, the error |f(f^-1(x) + t d) - x - t J^-1 d| with J the
    finite-difference Jacobian of f^-1 at x; a second-order remainder keeps error / t^2
    roughly constant as t shrinks.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    d = np.asarray(direction, dtype=np.float64).ravel()
    if x.size != flow.dim or d.size != flow.dim:
        raise ShapeError("lemma1_check", x.shape, d.shape)
    scales = [float(t) for t in scales]
    if any(t <= 0 for t in scales):
        raise ContractError("scales must be positive")
    with dc.precision(np.float64):
        jac = dc.numeric_jacobian(lambda v: flow.encode(v[None])[0], x, step)
        condition = float(np.linalg.cond(jac))
        if not np.isfinite(condition) or condition > max_condition:
            raise ConditioningError("numeric Jacobian of the inverse flow is singular", condition)
        linear = np.linalg.solve(jac, d)
        z = flow.encode(x[None])[0].astype(np.float64)
        rows = []
        for t in scales:
            moved = flow.decode((z + t * d)[None])[0].astype(np.float64)
            error = float(np.linalg.norm(moved - x - t * linear))
            rows.append({"scale": t, "error": error, "error_over_t2": error / t ** 2})
    return pd.DataFrame(rows)


@dataclass(frozen=True)
class CovarianceSummary:
    advflow: float
    nattack: float
    coordinates: tuple[int, ...] = field(default_factory=tuple)

    @property
    def ratio(self) -> float:
        return self.advflow / self.nattack if self.nattack > 0 else float("inf")

    def to_dict(self) -> dict[str, Any]:
        return {"advflow_mean_abs_corr": self.advflow, "nattack_mean_abs_corr": self.nattack,
                "ratio": self.ratio, "coordinates": list(self.coordinates)}


def offdiag_correlation(deltas: np.ndarray, top: int = 16, min_samples: int = 100,
                        coordinates: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Mean absolute off-diagonal correlation over the highest-variance coordinates."""
    X = np.asarray(deltas, dtype=np.float64).reshape(len(deltas), -1)
    if len(X) < min_samples:
        raise ContractError(f"need at least {min_samples} perturbations, got {len(X)}")
    var = X.var(axis=0)
    if coordinates is None:
        coordinates = np.sort(np.argsort(-var, kind="stable")[:min(top, X.shape[1])])
    if len(coordinates) < 2:
        raise ContractError("need at least 2 coordinates for a correlation")
    if np.any(var[coordinates] == 0):
        raise VarianceError("perturbations are constant in a selected coordinate")
    corr = np.corrcoef(X[:, coordinates], rowvar=False)
    off = corr[~np.eye(len(coordinates), dtype=bool)]
    return float(np.mean(np.abs(off))), coordinates


def perturbation_covariance(advflow_deltas: np.ndarray, nattack_deltas: np.ndarray,
                            top: int = 16, min_samples: int = 100) -> CovarianceSummary:
    a = np.asarray(advflow_deltas).reshape(len(advflow_deltas), -1)
    b = np.asarray(nattack_deltas).reshape(len(nattack_deltas), -1)
    if a.shape[1] != b.shape[1]:
        raise ShapeError("perturbation_covariance", a.shape, b.shape)
    adv, coords = offdiag_correlation(a, top, min_samples)
    nat, _ = offdiag_correlation(b, top, min_samples)
    return CovarianceSummary(adv, nat, tuple(int(c) for c in coords))
