"""Mahalanobis-score adversarial detector and the latent-shift statistic."""
from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np
import sklearn.covariance
from scipy import linalg, special
from sklearn.linear_model import LogisticRegression, LogisticRegressionCV
from sklearn.metrics import roc_auc_score
from sklearn.model_selection import StratifiedKFold
from sklearn.preprocessing import StandardScaler

from .blackbox import ToyClassifier
from .errors import ConditioningError, ContractError, DomainError, ShapeError
from .flowmodel import FlowModel
from .threat import Bounds

logger = logging.getLogger(__name__)

RIDGE_GRID = (1e-3, 1e-2, 1e-1)
MAX_CONDITION = 1e12
POSITIVE, NEGATIVE = 1, 0


@dataclass(frozen=True, eq=False)
class GaussianClassStats:
    """Class means with one shared (tied) covariance."""

    means: np.ndarray
    covariance: np.ndarray
    layer: int = -1
    ridge: float = 0.0

    def __post_init__(self):
        cov = self.covariance
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1] or cov.shape[0] != self.means.shape[1]:
            raise ShapeError("gaussian_stats", self.means.shape, cov.shape)
        try:
            factor = linalg.cho_factor(cov, lower=True)
        except linalg.LinAlgError:
            raise ConditioningError("covariance is not positive definite; increase the ridge",
                                    float(np.linalg.cond(cov))) from None
        condition = float(np.linalg.cond(cov))
        if condition > MAX_CONDITION:
            raise ConditioningError("covariance is ill-conditioned; increase the ridge", condition)
        object.__setattr__(self, "_factor", factor)

    @classmethod
    def from_moments(cls, means: np.ndarray, covariance: np.ndarray, layer: int = -1,
                     ridge: float = 0.0) -> "GaussianClassStats":
        cov = np.asarray(covariance, dtype=np.float64)
        cov = 0.5 * (cov + cov.T) + ridge * np.eye(len(cov))
        return cls(np.atleast_2d(np.asarray(means, dtype=np.float64)), cov, layer, ridge)

    @property
    def num_classes(self) -> int:
        return len(self.means)

    def squared_distances(self, features: np.ndarray) -> np.ndarray:
        v = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if v.shape[1] != self.means.shape[1]:
            raise ShapeError("mahalanobis_score", v.shape, self.means.shape)
        out = np.empty((len(v), self.num_classes))
        for c, mu in enumerate(self.means):
            diff = v - mu
            out[:, c] = np.einsum("ij,ji->i", diff, linalg.cho_solve(self._factor, diff.T))
        return out


def fit_gaussians_from_features(features: np.ndarray, labels: np.ndarray, ridge: float = 1e-6,
                                layer: int = -1) -> GaussianClassStats:
    if ridge <= 0:
        raise DomainError(f"ridge must be positive, got {ridge}")
    feats = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64).ravel()
    if len(feats) != len(labels):
        raise ShapeError("fit_class_gaussians", feats.shape, labels.shape)
    classes = np.arange(labels.max() + 1)
    counts = np.bincount(labels, minlength=len(classes))
    if counts.min() < 2:
        raise ContractError(f"need at least 2 samples per class, got counts {counts.tolist()}")
    means = np.stack([feats[labels == c].mean(axis=0) for c in classes])
    centered = feats - means[labels]
    cov = sklearn.covariance.EmpiricalCovariance(assume_centered=True).fit(centered).covariance_
    return GaussianClassStats.from_moments(means, cov, layer, ridge)


def fit_class_gaussians(classifier: ToyClassifier, data: np.ndarray, labels: np.ndarray,
                        layer: int = -1, ridge: float = 1e-6) -> GaussianClassStats:
    return fit_gaussians_from_features(classifier.features(data, layer), labels, ridge, layer)


def mahalanobis_score(stats: GaussianClassStats, features: np.ndarray) -> np.ndarray | float:
    """Negative squared Mahalanobis distance to the closest class mean."""
    single = np.ndim(features) == 1
    score = -stats.squared_distances(features).min(axis=1)
    return float(score[0]) if single else score


# --------------------------------------------------------------------------
# Detector
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DetectionDataset:
    """Per-layer scores; label 1 for clean and noisy rows, 0 for adversarial rows."""

    scores: np.ndarray
    labels: np.ndarray
    kinds: np.ndarray
    train_mask: np.ndarray

    @property
    def train_index(self) -> np.ndarray:
        return np.flatnonzero(self.train_mask)

    @property
    def eval_index(self) -> np.ndarray:
        return np.flatnonzero(~self.train_mask)

    def balance(self) -> dict[str, int]:
        return {"positives": int(np.sum(self.labels == POSITIVE)),
                "negatives": int(np.sum(self.labels == NEGATIVE))}


def split_mask(labels: np.ndarray, train_fraction: float, seed: int) -> np.ndarray:
    """Seeded per-class split; every nonempty class gets at least one training row."""
    rng = np.random.default_rng(seed)
    mask = np.zeros(len(labels), dtype=bool)
    for value in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == value))
        take = max(1, int(round(train_fraction * len(idx))))
        mask[idx[:take]] = True
    return mask


def build_detection_dataset(classifier: ToyClassifier, stats: Sequence[GaussianClassStats],
                            clean: np.ndarray, adversarial: np.ndarray, noise_std: float,
                            bounds: Bounds, seed: int = 0, train_fraction: float = 0.1) -> DetectionDataset:
    """Clean, noisy and adversarial rows scored per layer.

    Noisy rows add Gaussian noise of std ``noise_std`` (epsilon / 2 of the attack by
    default in the CLI) to the clean rows.
    """
    rng = np.random.default_rng(seed)
    clean = np.asarray(clean, dtype=np.float64)
    adversarial = np.asarray(adversarial, dtype=np.float64).reshape((-1, *clean.shape[1:]))
    noisy = np.clip(clean + rng.normal(0.0, noise_std, clean.shape), *bounds)
    batches = [clean, noisy, adversarial]
    names = ["clean", "noisy", "adversarial"]
    rows = []
    for s in stats:
        rows.append(np.concatenate([mahalanobis_score(s, classifier.features(b, s.layer)) if len(b)
                                    else np.empty(0) for b in batches]))
    scores = np.stack(rows, axis=1)
    kinds = np.concatenate([np.full(len(b), n) for b, n in zip(batches, names)])
    labels = np.where(kinds == "adversarial", NEGATIVE, POSITIVE)
    return DetectionDataset(scores, labels, kinds, split_mask(labels, train_fraction, seed + 1))


@dataclass(frozen=True, eq=False)
class DetectorModel:
    weights: np.ndarray
    bias: float
    ridge: float
    n_train: int

    def decision(self, scores: np.ndarray) -> np.ndarray:
        return np.atleast_2d(scores) @ self.weights + self.bias

    def predict_proba(self, scores: np.ndarray) -> np.ndarray:
        return special.expit(self.decision(scores))


def train_detector(dataset: DetectionDataset, ridge_grid: Sequence[float] = RIDGE_GRID,
                   seed: int = 0) -> DetectorModel:
    """Logistic regression on standardized scores, L2 strength picked by 3-fold CV."""
    idx = dataset.train_index
    X, y = dataset.scores[idx], dataset.labels[idx]
    counts = np.bincount(y, minlength=2)
    if counts.min() == 0:
        raise ContractError("detector training split holds a single class")
    scaler = StandardScaler().fit(X)
    Xs = scaler.transform(X)
    if counts.min() >= 3:
        model = LogisticRegressionCV(
            Cs=[1.0 / r for r in ridge_grid],
            cv=StratifiedKFold(n_splits=3, shuffle=True, random_state=seed),
            solver="lbfgs", tol=1e-6, max_iter=1000,
        ).fit(Xs, y)
        ridge = 1.0 / float(model.C_[0])
    else:
        ridge = float(ridge_grid[len(ridge_grid) // 2])
        model = LogisticRegression(C=1.0 / ridge, solver="lbfgs", tol=1e-6, max_iter=1000).fit(Xs, y)
    # fold the standardization into the linear model
    w = model.coef_[0] / scaler.scale_
    b = float(model.intercept_[0] - np.sum(model.coef_[0] * scaler.mean_ / scaler.scale_))
    logger.info("trained detector on %d rows, ridge %.0e", len(idx), ridge)
    return DetectorModel(w, b, ridge, len(idx))


@dataclass(frozen=True, eq=False)
class DetectionMetrics:
    auroc: float
    accuracy: float
    n_eval: int


def evaluate_detector(model: DetectorModel, dataset: DetectionDataset) -> DetectionMetrics:
    """AUROC and 0.5-threshold accuracy on the evaluation rows only."""
    idx = dataset.eval_index
    y = dataset.labels[idx]
    if len(np.unique(y)) < 2:
        raise ContractError("evaluation split holds a single class; AUROC is undefined")
    decision = model.decision(dataset.scores[idx])
    auroc = float(roc_auc_score(y, decision))
    accuracy = float(np.mean((decision > 0).astype(int) == y))
    return DetectionMetrics(auroc, accuracy, len(idx))


def detector_report(variant: str, model: DetectorModel, metrics: DetectionMetrics,
                    dataset: DetectionDataset, seed: int) -> dict[str, Any]:
    return {"attack_variant": variant, "auroc": metrics.auroc, "accuracy": metrics.accuracy,
            "n_train": model.n_train, "n_eval": metrics.n_eval, "seed": seed,
            "ridge": model.ridge, **dataset.balance()}


# --------------------------------------------------------------------------
# Latent shift
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LatentShift:
    ratios: np.ndarray
    counts: np.ndarray
    edges: np.ndarray

    @property
    def median(self) -> float:
        return float(np.median(self.ratios)) if len(self.ratios) else 0.0

    def to_dict(self) -> dict[str, Any]:
        return {"median": self.median, "ratios": self.ratios.tolist(),
                "counts": self.counts.tolist(), "edges": self.edges.tolist()}


def latent_shift(flow: FlowModel, clean: np.ndarray, adversarial: np.ndarray, bins: int = 20) -> LatentShift:
    """Per-sample |f^-1(x_adv) - f^-1(x)| / |f^-1(x)| with a histogram summary."""
    clean = np.asarray(clean, dtype=np.float64)
    adversarial = np.asarray(adversarial, dtype=np.float64)
    if clean.shape != adversarial.shape:
        raise ShapeError("latent_shift", clean.shape, adversarial.shape)
    if len(clean) == 0:
        return LatentShift(np.empty(0), np.zeros(bins, dtype=int), np.linspace(0.0, 1.0, bins + 1))
    z_clean = flow.encode(clean).astype(np.float64)
    z_adv = flow.encode(adversarial).astype(np.float64)
    norms = np.linalg.norm(z_clean, axis=1)
    if np.any(norms == 0):
        raise DomainError("latent_shift: a clean input encodes to the origin")
    ratios = np.linalg.norm(z_adv - z_clean, axis=1) / norms
    counts, edges = np.histogram(ratios, bins=bins)
    return LatentShift(ratios, counts, edges)
