"""Toy datasets used as attack targets, with their documented data bounds."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from sklearn.datasets import load_digits, make_blobs, make_moons

from .errors import ConfigError, ContractError
from .threat import Bounds

logger = logging.getLogger(__name__)

BOUNDS: dict[str, Bounds] = {
    "two-moons": (-3.0, 3.0),
    "blobs": (-6.0, 6.0),
    "digits8": (0.0, 1.0),
    "digits16": (0.0, 1.0),
}
KINDS = tuple(BOUNDS)

# two-moons is make_moons centred and shrunk to roughly [-0.4, 0.4] x [-0.2, 0.2]
MOONS_CENTER = np.array([0.5, 0.25])
MOONS_SCALE = 0.25


@dataclass(frozen=True, eq=False)
class Dataset:
    kind: str
    data: np.ndarray
    labels: np.ndarray
    bounds: Bounds

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    def metadata(self) -> dict:
        return {"kind": self.kind, "n": len(self.data), "shape": list(self.data.shape[1:]),
                "bounds": list(self.bounds), "num_classes": self.num_classes}


def _sub_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2 ** 31 - 1))


def make_dataset(kind: str, n: int, rng: np.random.Generator, noise: float = 0.1) -> Dataset:
    """Draw ``n`` samples of ``kind``; two-moons ``noise`` is in make_moons units, before scaling."""
    if kind not in BOUNDS:
        raise ConfigError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    if n < 1:
        raise ContractError(f"n must be >= 1, got {n}")
    lo, hi = BOUNDS[kind]
    if kind == "two-moons":
        data, labels = make_moons(n_samples=n, noise=noise, random_state=_sub_seed(rng))
        data = MOONS_SCALE * (data - MOONS_CENTER)
    elif kind == "blobs":
        data, labels = make_blobs(n_samples=n, centers=np.array([[-2.0, -2.0], [2.0, 2.0]]),
                                  cluster_std=0.8, random_state=_sub_seed(rng))
    else:
        digits = load_digits()
        idx = rng.choice(len(digits.images), size=n, replace=n > len(digits.images))
        data = digits.images[idx] / 16.0
        labels = digits.target[idx]
        if kind == "digits16":
            data = ndimage.zoom(data, (1.0, 2.0, 2.0), order=1, grid_mode=True, mode="nearest")
    data = np.clip(data, lo, hi).astype(np.float32)
    logger.info("generated %d %s samples", n, kind)
    return Dataset(kind, data, labels.astype(np.int64), (lo, hi))


def infer_bounds(data: np.ndarray) -> Bounds:
    """Image batches (n, H, W) or (n, C, H, W) live in [0, 1]."""
    if data.ndim >= 3:
        return (0.0, 1.0)
    raise ConfigError("cannot infer data bounds for vector data; set the bounds key "
                      "or keep the dataset.json written by gen-data next to the data")
