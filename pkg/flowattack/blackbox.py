"""Query-only classifier access plus the toy targets the attacks run against."""
from __future__ import annotations

import dataclasses
import logging
import threading
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy import special
from tqdm import tqdm

from . import diffcore as dc
from .containers import CLASSIFIER_MAGIC, read_checkpoint, write_checkpoint
from .diffcore import ParamSet, Tape, Tensor
from .errors import BudgetExhaustedError, ConfigError, ContractError, FormatError, NumericError, ShapeError
from .threat import Bounds, project_linf

logger = logging.getLogger(__name__)

ProbFn = Callable[[np.ndarray], np.ndarray]


class ClassifierOracle:
    """Probability oracle with an atomic query counter and an optional budget.

    ``guard`` is called with every admitted batch before evaluation; tests use it to
    assert properties of everything an attack submits.
    """

    def __init__(self, prob_fn: ProbFn, num_classes: int, budget: int | None = None,
                 guard: Callable[[np.ndarray], None] | None = None):
        if budget is not None and budget < 0:
            raise ContractError(f"budget must be >= 0, got {budget}")
        self._prob_fn = prob_fn
        self.num_classes = num_classes
        self.budget = budget
        self.guard = guard
        self._count = 0
        self._lock = threading.Lock()

    @property
    def count(self) -> int:
        return self._count

    @property
    def remaining(self) -> int | None:
        return None if self.budget is None else self.budget - self._count

    def query(self, x: np.ndarray) -> np.ndarray:
        batch = np.asarray(x)
        n = len(batch)
        with self._lock:
            if self.budget is not None and self._count + n > self.budget:
                logger.debug("refused batch of %d at %d/%d queries", n, self._count, self.budget)
                raise BudgetExhaustedError(self._count, self.budget, n)
            self._count += n
        if self.guard is not None:
            self.guard(batch)
        probs = np.asarray(self._prob_fn(batch), dtype=np.float64)
        if probs.shape != (n, self.num_classes):
            raise ShapeError("query_probs", probs.shape, (n, self.num_classes))
        if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-5):
            raise ContractError("oracle returned an invalid probability vector")
        return probs


def query_probs(oracle: ClassifierOracle, x: np.ndarray) -> np.ndarray:
    return oracle.query(x)


# --------------------------------------------------------------------------
# Toy classifier
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassifierTrainConfig:
    hidden: tuple[int, ...] = (64, 64)
    leaky_slope: float = 0.1
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-2
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not self.hidden or min(self.hidden) < 1:
            raise ConfigError("classifier needs at least one hidden layer of width >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")


@dataclass(frozen=True)
class AdvTrainConfig(ClassifierTrainConfig):
    epsilon: float = 0.1
    step: float = 0.025
    steps: int = 7

    def __post_init__(self):
        super().__post_init__()
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.steps < 1:
            raise ConfigError("PGD steps must be >= 1")
        if self.epsilon > 0 and not 0 < self.step <= self.epsilon:
            raise ConfigError(f"PGD step must lie in (0, epsilon], got {self.step}")


@dataclass
class ClassifierTrainReport:
    epoch_loss: list[float] = field(default_factory=list)
    epoch_accuracy: list[float] = field(default_factory=list)
    adversarial: bool = False
    epsilon: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


class ToyClassifier:
    """Fully-connected leaky-relu network with a softmax output."""

    def __init__(self, input_shape: tuple[int, ...], num_classes: int, hidden: tuple[int, ...],
                 bounds: Bounds, leaky_slope: float = 0.1, params: ParamSet | None = None,
                 seed: int = 0):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.num_classes = int(num_classes)
        self.hidden = tuple(hidden)
        self.bounds = (float(bounds[0]), float(bounds[1]))
        self.leaky_slope = leaky_slope
        self.report: ClassifierTrainReport | None = None
        sizes = [self.dim, *self.hidden, self.num_classes]
        self._sizes = list(zip(sizes[:-1], sizes[1:]))
        if params is None:
            rng = np.random.default_rng(np.random.SeedSequence([seed, 0x436C66]))
            params = ParamSet()
            for i, (fan_in, fan_out) in enumerate(self._sizes):
                params.add(f"w{i}", rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out)))
                params.add(f"b{i}", np.zeros((1, fan_out)))
        self.params = params

    @property
    def dim(self) -> int:
        return int(np.prod(self.input_shape))

    def _flat(self, x) -> Tensor:
        t = x if isinstance(x, Tensor) else Tensor(x)
        if t.ndim == 2 and t.shape[1] == self.dim:
            return t
        if t.shape == self.input_shape or t.shape[1:] == self.input_shape:
            return dc.reshape(t, (-1, self.dim))
        raise ShapeError("classifier", t.shape, (None, *self.input_shape))

    def _activations(self, x) -> list[Tensor]:
        h = self._flat(x)
        out = []
        last = len(self._sizes) - 1
        for i in range(len(self._sizes)):
            h = dc.add(dc.matmul(h, self.params[f"w{i}"]), self.params[f"b{i}"])
            if i < last:
                h = dc.leaky_relu(h, self.leaky_slope)
            out.append(h)
        return out

    def logits_tensor(self, x) -> Tensor:
        return self._activations(x)[-1]

    def logits(self, x) -> np.ndarray:
        return self.logits_tensor(x).numpy()

    def features(self, x, layer: int = -1) -> np.ndarray:
        """Post-activation output of hidden layer ``layer`` (default: penultimate)."""
        hidden = self._activations(x)[:-1]
        return np.asarray(hidden[layer].numpy(), dtype=np.float64)

    def probs(self, x) -> np.ndarray:
        return special.softmax(self.logits(x).astype(np.float64), axis=1)

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)

    def accuracy(self, x, labels) -> float:
        return float(np.mean(self.predict(x) == np.asarray(labels).astype(np.int64)))

    def oracle(self, budget: int | None = None, guard=None) -> ClassifierOracle:
        return ClassifierOracle(self.probs, self.num_classes, budget, guard)

    def input_grad(self, x, labels) -> np.ndarray:
        """Gradient of the mean cross-entropy with respect to the input batch."""
        xt = self._flat(Tensor(x))
        with Tape() as tape:
            tape.watch(xt, "x")
            loss = dc.softmax_cross_entropy(self.logits_tensor(xt), labels)
        return dc.backward(loss, tape)["x"].reshape(np.shape(x))

    def manifest(self) -> dict[str, Any]:
        return {"format": "classifier", "input_shape": list(self.input_shape),
                "num_classes": self.num_classes, "hidden": list(self.hidden),
                "bounds": list(self.bounds), "leaky_slope": self.leaky_slope}


def pgd_attack(classifier: ToyClassifier, x: np.ndarray, y: np.ndarray, epsilon: float,
               step: float, iters: int, bounds: Bounds | None = None) -> np.ndarray:
    """White-box l-inf PGD without random start; the result is always feasible."""
    bounds = classifier.bounds if bounds is None else bounds
    x0 = np.asarray(x, dtype=np.float64)
    x_adv = project_linf(x0, x0, epsilon, bounds)
    if epsilon == 0:
        return x_adv
    for _ in range(iters):
        g = classifier.input_grad(x_adv, y)
        x_adv = project_linf(x_adv + step * np.sign(g), x0, epsilon, bounds)
    return x_adv


def _fit(classifier: ToyClassifier, data: np.ndarray, labels: np.ndarray, config: ClassifierTrainConfig,
         perturb: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None) -> ClassifierTrainReport:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x466974]))
    report = ClassifierTrainReport(adversarial=perturb is not None)
    state = dc.AdamState()
    desc = "adv-train" if perturb is not None else "train-classifier"
    for epoch in tqdm(range(config.epochs), desc=desc, disable=None, leave=False):
        order = rng.permutation(len(data))
        losses = []
        for b, start in enumerate(range(0, len(data), config.batch_size)):
            idx = order[start:start + config.batch_size]
            xb, yb = data[idx], labels[idx]
            if perturb is not None:
                xb = perturb(xb, yb)
            try:
                with Tape() as tape:
                    tape.watch(classifier.params)
                    loss = dc.softmax_cross_entropy(classifier.logits_tensor(xb), yb)
                grads = dc.backward(loss, tape)
            except NumericError as exc:
                raise NumericError(f"classifier training diverged: {exc}", epoch=epoch, batch=b) from exc
            state = dc.adam_step(classifier.params, grads, state, config.lr, config.weight_decay)
            losses.append(loss.item())
        report.epoch_loss.append(float(np.mean(losses)))
        report.epoch_accuracy.append(classifier.accuracy(data, labels))
        logger.debug("%s epoch %d loss %.4f accuracy %.4f", desc, epoch,
                     report.epoch_loss[-1], report.epoch_accuracy[-1])
    return report


def _prepare(data, labels, num_classes):
    data = np.asarray(data, dtype=np.float32)
    labels = np.asarray(labels).astype(np.int64).ravel()
    if len(data) == 0 or len(data) != len(labels):
        raise ContractError(f"need matching nonempty data and labels, got {len(data)} and {len(labels)}")
    if not np.all(np.isfinite(data)):
        raise NumericError("training data contains non-finite values")
    k = int(labels.max()) + 1 if num_classes is None else num_classes
    if labels.min() < 0 or labels.max() >= k:
        raise ContractError(f"labels must lie in [0, {k})")
    return data, labels, max(k, 2)


def train_classifier(data: np.ndarray, labels: np.ndarray, config: ClassifierTrainConfig,
                     bounds: Bounds, num_classes: int | None = None) -> ToyClassifier:
    data, labels, k = _prepare(data, labels, num_classes)
    clf = ToyClassifier(data.shape[1:], k, config.hidden, bounds, config.leaky_slope, seed=config.seed)
    clf.report = _fit(clf, data, labels, config)
    logger.info("trained classifier: %d samples, accuracy %.4f", len(data), clf.report.epoch_accuracy[-1])
    return clf


def adversarial_train(data: np.ndarray, labels: np.ndarray, config: AdvTrainConfig,
                      bounds: Bounds, num_classes: int | None = None) -> ToyClassifier:
    """PGD adversarial training; ``epsilon == 0`` is exactly standard training."""
    data, labels, k = _prepare(data, labels, num_classes)
    clf = ToyClassifier(data.shape[1:], k, config.hidden, bounds, config.leaky_slope, seed=config.seed)
    perturb = None
    if config.epsilon > 0:
        def perturb(xb, yb):
            return pgd_attack(clf, xb, yb, config.epsilon, config.step, config.steps, bounds)
    clf.report = _fit(clf, data, labels, config, perturb)
    clf.report.epsilon = config.epsilon
    logger.info("adversarially trained classifier (epsilon %.4g): clean accuracy %.4f",
                config.epsilon, clf.report.epoch_accuracy[-1])
    return clf


def save_classifier(classifier: ToyClassifier, path: str | Path) -> None:
    arrays = [(n, classifier.params[n].data, classifier.params.is_trainable(n)) for n in classifier.params]
    write_checkpoint(path, CLASSIFIER_MAGIC, classifier.manifest(), arrays)


def load_classifier(path: str | Path) -> ToyClassifier:
    manifest, arrays = read_checkpoint(path, CLASSIFIER_MAGIC)
    try:
        shell = ToyClassifier(tuple(manifest["input_shape"]), manifest["num_classes"],
                              tuple(manifest["hidden"]), tuple(manifest["bounds"]),
                              manifest["leaky_slope"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"classifier manifest incomplete: {exc}", 10) from None
    expected = [(n, shell.params[n].shape) for n in shell.params]
    if expected != [(n, a.shape) for n, a, _ in arrays]:
        raise FormatError("classifier parameters do not match the manifest architecture", 10)
    params = ParamSet()
    for name, arr, trainable in arrays:
        params.add(name, arr, trainable=trainable)
    shell.params = params
    return shell
