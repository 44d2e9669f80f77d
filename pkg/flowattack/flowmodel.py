"""Real NVP normalizing flow with affine couplings, exact inversion and MLE training.

Direction conventions: ``flow_forward`` is the generative map ``f`` (latent z to data x),
``flow_inverse`` is ``f^-1``. Layers are stored in data-to-latent order, so encoding
walks the list front to back calling each layer's ``inverse`` and decoding walks it back
to front calling ``forward``. Every pass returns a per-sample log-determinant of shape
(batch,).
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from tqdm import tqdm

from . import diffcore as dc
from .containers import FLOW_MAGIC, read_checkpoint, write_checkpoint
from .diffcore import ParamSet, Tape, Tensor
from .errors import ConfigError, ContractError, DomainError, FormatError, NumericError, ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FlowConfig:
    kind: str = "dense"                 # "dense" (flat vectors) or "image" (multi-scale)
    input_shape: tuple[int, ...] = (2,)
    hidden: int = 128
    blocks: int = 4                     # dense mode
    highres_blocks: int = 2             # image mode
    lowres_blocks: int = 2
    fc_blocks: int = 2
    clamp_alpha: float = 1.5
    leaky_slope: float = 0.1
    logit_shrink: float = 0.05
    exit_fraction: float = 0.75
    final_init_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.kind not in ("dense", "image"):
            raise ConfigError(f"flow kind must be 'dense' or 'image', got {self.kind!r}")
        if self.clamp_alpha <= 0:
            raise DomainError(f"clamp_alpha must be positive, got {self.clamp_alpha}")
        if self.hidden < 1:
            raise ConfigError("hidden width must be >= 1")
        if self.final_init_std < 0:
            raise ConfigError("final_init_std must be >= 0")
        if self.kind == "image":
            shape = self.image_shape
            if shape[1] % 2 or shape[2] % 2:
                raise ConfigError(f"image flow needs even spatial extents, got {self.input_shape}")
            if not 0.0 < self.exit_fraction < 1.0:
                raise ConfigError("exit_fraction must lie in (0, 1)")
        if not 0.0 < self.logit_shrink < 0.5:
            raise ConfigError("logit_shrink must lie in (0, 0.5)")

    @property
    def dim(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def image_shape(self) -> tuple[int, int, int]:
        shape = self.input_shape
        return (1, *shape) if len(shape) == 2 else tuple(shape)


@dataclass(frozen=True)
class FlowTrainConfig:
    epochs: int = 350
    batch_size: int = 64
    lr: float = 1e-4
    lr_final: float = 1e-6
    weight_decay: float = 1e-5
    dequant_std: float = 0.02
    holdout_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr <= 0 or self.lr_final <= 0:
            raise ConfigError("learning rates must be positive")
        if self.dequant_std < 0:
            raise ConfigError("dequant_std must be >= 0")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must lie in [0, 1)")

    def lr_at(self, epoch: int) -> float:
        if self.epochs == 1:
            return self.lr
        return self.lr * (self.lr_final / self.lr) ** (epoch / (self.epochs - 1))


# --------------------------------------------------------------------------
# Layers
# --------------------------------------------------------------------------

def soft_clamp(s, alpha: float) -> Tensor:
    """(2 alpha / pi) * arctan(s / alpha): bounded in (-alpha, alpha), monotone."""
    if alpha <= 0:
        raise DomainError(f"soft_clamp: alpha must be positive, got {alpha}")
    return dc.mul(dc.arctan(dc.mul(s, 1.0 / alpha)), 2.0 * alpha / math.pi)


def _sum_logdet(*terms: Tensor | None) -> Tensor | None:
    total = None
    for t in terms:
        if t is not None:
            total = t if total is None else dc.add(total, t)
    return total


class Layer:
    kind = "layer"
    dim: int

    def forward(self, params: ParamSet, z: Tensor) -> tuple[Tensor, Tensor | None]:
        raise NotImplementedError

    def inverse(self, params: ParamSet, x: Tensor) -> tuple[Tensor, Tensor | None]:
        raise NotImplementedError

    def manifest(self) -> dict[str, Any]:
        return {"kind": self.kind, "dim": self.dim}

    def _check(self, t: Tensor) -> None:
        if t.ndim != 2 or t.shape[1] != self.dim:
            raise ShapeError(self.kind, t.shape, (None, self.dim))


class _Subnet:
    """Linear, leaky-relu, Linear, leaky-relu, Linear."""

    def __init__(self, prefix: str, n_in: int, n_out: int, hidden: int, slope: float):
        self.prefix = prefix
        self.sizes = [(n_in, hidden), (hidden, hidden), (hidden, n_out)]
        self.slope = slope

    def init(self, params: ParamSet, rng: np.random.Generator, final_std: float) -> None:
        for i, (fan_in, fan_out) in enumerate(self.sizes):
            if i == len(self.sizes) - 1:
                w = rng.normal(0.0, final_std, (fan_in, fan_out)) if final_std > 0 else np.zeros((fan_in, fan_out))
            else:
                w = rng.normal(0.0, math.sqrt(2.0 / fan_in), (fan_in, fan_out))
            params.add(f"{self.prefix}.w{i}", w)
            params.add(f"{self.prefix}.b{i}", np.zeros((1, fan_out)))

    def __call__(self, params: ParamSet, h: Tensor) -> Tensor:
        last = len(self.sizes) - 1
        for i in range(len(self.sizes)):
            h = dc.add(dc.matmul(h, params[f"{self.prefix}.w{i}"]), params[f"{self.prefix}.b{i}"])
            if i < last:
                h = dc.leaky_relu(h, self.slope)
        return h


class CouplingLayer(Layer):
    """Affine coupling updating both halves in turn.

    x1 = z1 * exp(c(s1(z2))) + t1(z2);  x2 = z2 * exp(c(s2(x1))) + t2(x1)
    """

    kind = "coupling"

    def __init__(self, name: str, dim: int, hidden: int, alpha: float, slope: float):
        if dim < 2:
            raise ContractError(f"coupling layer needs at least 2 features, got {dim}")
        self.name = name
        self.dim = dim
        self.alpha = alpha
        self.idx1 = np.arange(dim // 2)
        self.idx2 = np.arange(dim // 2, dim)
        n1, n2 = len(self.idx1), len(self.idx2)
        self.s1 = _Subnet(f"{name}.s1", n2, n1, hidden, slope)
        self.t1 = _Subnet(f"{name}.t1", n2, n1, hidden, slope)
        self.s2 = _Subnet(f"{name}.s2", n1, n2, hidden, slope)
        self.t2 = _Subnet(f"{name}.t2", n1, n2, hidden, slope)

    def init(self, params: ParamSet, rng: np.random.Generator, final_std: float) -> None:
        for net in (self.s1, self.t1, self.s2, self.t2):
            net.init(params, rng, final_std)

    def forward(self, params, z):
        self._check(z)
        z1, z2 = dc.take(z, self.idx1), dc.take(z, self.idx2)
        s1 = soft_clamp(self.s1(params, z2), self.alpha)
        x1 = dc.add(dc.mul(z1, dc.exp(s1)), self.t1(params, z2))
        s2 = soft_clamp(self.s2(params, x1), self.alpha)
        x2 = dc.add(dc.mul(z2, dc.exp(s2)), self.t2(params, x1))
        logdet = dc.add(dc.sum(s1, axis=1), dc.sum(s2, axis=1))
        return dc.concat([x1, x2], axis=1), logdet

    def inverse(self, params, x):
        self._check(x)
        x1, x2 = dc.take(x, self.idx1), dc.take(x, self.idx2)
        s2 = soft_clamp(self.s2(params, x1), self.alpha)
        z2 = dc.mul(dc.sub(x2, self.t2(params, x1)), dc.exp(dc.mul(s2, -1.0)))
        s1 = soft_clamp(self.s1(params, z2), self.alpha)
        z1 = dc.mul(dc.sub(x1, self.t1(params, z2)), dc.exp(dc.mul(s1, -1.0)))
        logdet = dc.mul(dc.add(dc.sum(s1, axis=1), dc.sum(s2, axis=1)), -1.0)
        return dc.concat([z1, z2], axis=1), logdet

    def manifest(self):
        return {"kind": self.kind, "dim": self.dim, "name": self.name, "alpha": self.alpha,
                "hidden": self.s1.sizes[0][1]}


class IndexLayer(Layer):
    """Volume-preserving reshuffle: encoding gathers ``perm``, decoding undoes it."""

    kind = "index"

    def __init__(self, perm: np.ndarray):
        self.perm = np.asarray(perm, dtype=np.int64)
        self.dim = len(self.perm)
        self.unperm = np.argsort(self.perm)

    def forward(self, params, z):
        self._check(z)
        return dc.take(z, self.unperm), None

    def inverse(self, params, x):
        self._check(x)
        return dc.take(x, self.perm), None

    def manifest(self):
        return {"kind": self.kind, "dim": self.dim, "perm": self.perm.tolist()}


class PermutationLayer(IndexLayer):
    kind = "permutation"

    def __init__(self, dim: int, rng: np.random.Generator):
        super().__init__(rng.permutation(dim))


class SqueezeLayer(IndexLayer):
    """Space-to-channel downsampling by ``factor`` on a flattened (C, H, W) layout."""

    kind = "squeeze"

    def __init__(self, shape: tuple[int, int, int], factor: int = 2):
        c, h, w = shape
        self.shape = shape
        self.factor = factor
        grid = np.arange(c * h * w).reshape(c, h // factor, factor, w // factor, factor)
        super().__init__(grid.transpose(0, 2, 4, 1, 3).ravel())

    def manifest(self):
        return {"kind": self.kind, "dim": self.dim, "shape": list(self.shape), "factor": self.factor}


class MixingLayer(Layer):
    """Fixed orthogonal channel mix, ``kron(Q, I_hw)``; log|det| = 0."""

    kind = "mixing"

    def __init__(self, name: str, shape: tuple[int, int, int]):
        self.name = name
        self.shape = shape
        c, h, w = shape
        self.dim = c * h * w
        self._cache: tuple[Tensor, np.ndarray] | None = None

    def init(self, params: ParamSet, rng: np.random.Generator) -> None:
        c = self.shape[0]
        q, r = np.linalg.qr(rng.standard_normal((c, c)))
        q = q * np.sign(np.diag(r))
        params.add(f"{self.name}.q", q, trainable=False)

    def matrix(self, params: ParamSet) -> np.ndarray:
        q = params[f"{self.name}.q"]
        if self._cache is None or self._cache[0] is not q:
            _, h, w = self.shape
            self._cache = (q, np.kron(q.data.astype(np.float64), np.eye(h * w)))
        return self._cache[1]

    def forward(self, params, z):
        self._check(z)
        return dc.matmul(z, self.matrix(params)), None

    def inverse(self, params, x):
        self._check(x)
        return dc.matmul(x, self.matrix(params).T), None

    def manifest(self):
        return {"kind": self.kind, "dim": self.dim, "name": self.name, "shape": list(self.shape)}


class LogitLayer(Layer):
    """Data-space transform between [0, 1] images and logit space.

    Encoding: y = logit(a + b x) with a = shrink, b = 1 - 2 shrink.
    """

    kind = "logit"

    def __init__(self, dim: int, shrink: float = 0.05):
        self.dim = dim
        self.shrink = shrink
        self.scale = 1.0 - 2.0 * shrink

    def forward(self, params, z):
        self._check(z)
        sig = dc.mul(dc.add(dc.tanh(dc.mul(z, 0.5)), 1.0), 0.5)
        x = dc.mul(dc.sub(sig, self.shrink), 1.0 / self.scale)
        # log(sig * (1 - sig)) = -softplus(z) - softplus(-z)
        per = dc.add(dc.softplus(z), dc.softplus(dc.mul(z, -1.0)))
        logdet = dc.mul(dc.add(dc.sum(per, axis=1), self.dim * math.log(self.scale)), -1.0)
        return x, logdet

    def inverse(self, params, x):
        self._check(x)
        p = dc.add(dc.mul(x, self.scale), self.shrink)
        q = dc.sub(1.0, p)
        y = dc.sub(dc.log(p), dc.log(q))
        logdet = dc.sub(self.dim * math.log(self.scale), dc.sum(dc.add(dc.log(p), dc.log(q)), axis=1))
        return y, logdet

    def manifest(self):
        return {"kind": self.kind, "dim": self.dim, "shrink": self.shrink}


class SplitLayer(Layer):
    """Multi-scale exit: during encoding only the first ``keep`` features continue."""

    kind = "split"

    def __init__(self, dim: int, keep: int):
        self.dim = dim
        self.keep = keep

    def manifest(self):
        return {"kind": self.kind, "dim": self.dim, "keep": self.keep}


# --------------------------------------------------------------------------
# Model
# --------------------------------------------------------------------------

class FlowModel:
    def __init__(self, config: FlowConfig, layers: list[Layer], params: ParamSet):
        self.config = config
        self.layers = layers
        self.params = params

    @property
    def dim(self) -> int:
        return self.config.dim

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.config.input_shape

    @property
    def is_image(self) -> bool:
        return self.config.kind == "image"

    def encode(self, x: np.ndarray) -> np.ndarray:
        z, _ = flow_inverse(self, x)
        return z.numpy()

    def decode(self, z: np.ndarray) -> np.ndarray:
        x, _ = flow_forward(self, z)
        return x.numpy()

    def manifest(self) -> dict[str, Any]:
        config = dataclasses.asdict(self.config)
        config["input_shape"] = list(self.config.input_shape)
        return {"format": "flow", "config": config, "layers": [l.manifest() for l in self.layers]}


def _as_batch(model: FlowModel, value) -> Tensor:
    t = value if isinstance(value, Tensor) else Tensor(value)
    d = model.dim
    if t.ndim == 2 and t.shape[1] == d:
        return t
    if t.shape == model.input_shape or t.shape[1:] == model.input_shape:
        return dc.reshape(t, (-1, d))
    raise ShapeError("flow", t.shape, (None, d))


def flow_inverse(model: FlowModel, x) -> tuple[Tensor, Tensor]:
    """Encode data ``x`` to latent ``z = f^-1(x)`` with log|det d f^-1 / dx| per sample."""
    h = _as_batch(model, x)
    n = h.shape[0]
    exits: list[Tensor] = []
    logdet = None
    for i, layer in enumerate(model.layers):
        try:
            if isinstance(layer, SplitLayer):
                exits.append(dc.take(h, np.arange(layer.keep, layer.dim)))
                h = dc.take(h, np.arange(layer.keep))
                continue
            h, ld = layer.inverse(model.params, h)
        except NumericError as exc:
            raise NumericError(str(exc), layer=i) from exc
        logdet = _sum_logdet(logdet, ld)
    z = dc.concat([*exits, h], axis=1) if exits else h
    return z, logdet if logdet is not None else Tensor(np.zeros(n))


def flow_forward(model: FlowModel, z) -> tuple[Tensor, Tensor]:
    """Decode latent ``z`` to data ``x = f(z)`` with log|det df / dz| per sample."""
    h = _as_batch(model, z)
    n = h.shape[0]
    splits = [layer for layer in model.layers if isinstance(layer, SplitLayer)]
    exits: list[Tensor] = []
    offset = 0
    for split in splits:
        width = split.dim - split.keep
        exits.append(dc.take(h, np.arange(offset, offset + width)))
        offset += width
    if splits:
        h = dc.take(h, np.arange(offset, model.dim))
    logdet = None
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        try:
            if isinstance(layer, SplitLayer):
                h = dc.concat([h, exits.pop()], axis=1)
                continue
            h, ld = layer.forward(model.params, h)
        except NumericError as exc:
            raise NumericError(str(exc), layer=i) from exc
        logdet = _sum_logdet(logdet, ld)
    return h, logdet if logdet is not None else Tensor(np.zeros(n))


def coupling_forward(layer: CouplingLayer, params: ParamSet, z) -> tuple[Tensor, Tensor]:
    return layer.forward(params, z if isinstance(z, Tensor) else Tensor(np.atleast_2d(z)))


def coupling_inverse(layer: CouplingLayer, params: ParamSet, x) -> tuple[Tensor, Tensor]:
    return layer.inverse(params, x if isinstance(x, Tensor) else Tensor(np.atleast_2d(x)))


def log_prob(model: FlowModel, x) -> Tensor:
    """Per-sample log density: log N(f^-1(x); 0, I) + log|det d f^-1 / dx|."""
    z, logdet = flow_inverse(model, x)
    base = dc.sum(dc.gaussian_log_density(z), axis=1)
    return dc.add(base, logdet)


def sample(model: FlowModel, n: int, seed: int = 0) -> np.ndarray:
    if n < 1:
        raise ContractError(f"sample needs n >= 1, got {n}")
    z = np.random.default_rng(seed).standard_normal((n, model.dim))
    return model.decode(z)


def init_flow(config: FlowConfig) -> FlowModel:
    """Build a flow; with ``final_init_std == 0`` the couplings start as the identity."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x466C6F77]))
    params = ParamSet()
    layers: list[Layer] = []
    width = config.hidden
    slope = config.leaky_slope
    alpha = config.clamp_alpha
    counter = iter(range(10 ** 6))

    def coupling(dim: int) -> CouplingLayer:
        layer = CouplingLayer(f"c{next(counter)}", dim, width, alpha, slope)
        layer.init(params, rng, config.final_init_std)
        return layer

    if config.kind == "dense":
        for _ in range(config.blocks):
            layers += [coupling(config.dim), PermutationLayer(config.dim, rng)]
    else:
        c, h, w = config.image_shape
        d = config.dim
        layers.append(LogitLayer(d, config.logit_shrink))
        for _ in range(config.highres_blocks):
            layers += [coupling(d), PermutationLayer(d, rng)]
        low = (4 * c, h // 2, w // 2)
        layers.append(SqueezeLayer((c, h, w)))
        for _ in range(config.lowres_blocks):
            mix = MixingLayer(f"m{next(counter)}", low)
            mix.init(params, rng)
            layers += [mix, coupling(d), PermutationLayer(d, rng)]
        keep = d - int(round(d * config.exit_fraction))
        layers.append(SplitLayer(d, keep))
        for _ in range(config.fc_blocks):
            layers += [coupling(keep), PermutationLayer(keep, rng)]
    model = FlowModel(config, layers, params)
    logger.debug("initialised %s flow, dim %d, %d layers, %d parameters",
                 config.kind, config.dim, len(layers), params.num_values())
    return model


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

@dataclass
class FlowTrainReport:
    epoch_nll: list[float] = field(default_factory=list)
    holdout_nll: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    n_train: int = 0
    n_holdout: int = 0

    @property
    def initial_holdout_nll(self) -> float:
        return self.holdout_nll[0]

    @property
    def final_holdout_nll(self) -> float:
        return self.holdout_nll[-1]

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def nll(model: FlowModel, data: np.ndarray, batch_size: int = 1024) -> float:
    """Mean negative log-likelihood in nats per sample."""
    total = 0.0
    for start in range(0, len(data), batch_size):
        total -= float(np.sum(log_prob(model, data[start:start + batch_size]).numpy(), dtype=np.float64))
    return total / len(data)


def train_mle(model: FlowModel, data: np.ndarray, config: FlowTrainConfig) -> FlowTrainReport:
    """Maximum-likelihood training with Adam and an exponential learning-rate decay."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 0 or len(data) == 0:
        raise ContractError("train_mle needs a nonempty dataset")
    data = data.reshape(len(data), -1)
    if data.shape[1] != model.dim:
        raise ShapeError("train_mle", data.shape, (None, model.dim))
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x4D4C45]))
    order = rng.permutation(len(data))
    n_hold = int(len(data) * config.holdout_fraction)
    holdout = data[order[:n_hold]] if n_hold else data
    train = data[order[n_hold:]]

    report = FlowTrainReport(n_train=len(train), n_holdout=len(holdout))
    report.holdout_nll.append(nll(model, holdout))
    state = dc.AdamState()
    logger.info("training flow on %d samples (%d held out), initial holdout NLL %.4f",
                len(train), n_hold, report.initial_holdout_nll)

    for epoch in tqdm(range(config.epochs), desc="train-flow", disable=None, leave=False):
        lr = config.lr_at(epoch)
        perm = rng.permutation(len(train))
        losses = []
        for b, start in enumerate(range(0, len(train), config.batch_size)):
            batch = train[perm[start:start + config.batch_size]]
            if config.dequant_std > 0:
                batch = batch + rng.normal(0.0, config.dequant_std, batch.shape)
                if model.is_image:
                    batch = np.clip(batch, 0.0, 1.0)
            try:
                with Tape() as tape:
                    tape.watch(model.params)
                    loss = dc.mul(dc.mean(log_prob(model, batch)), -1.0)
                grads = dc.backward(loss, tape)
                if not all(np.all(np.isfinite(g)) for g in grads.values()):
                    raise NumericError("non-finite gradient")
            except NumericError as exc:
                raise NumericError(f"flow training diverged: {exc}", epoch=epoch, batch=b) from exc
            state = dc.adam_step(model.params, grads, state, lr, config.weight_decay)
            losses.append(loss.item())
        report.epoch_nll.append(float(np.mean(losses)))
        report.holdout_nll.append(nll(model, holdout))
        report.lr.append(lr)
        logger.debug("epoch %d lr %.2e train NLL %.4f holdout NLL %.4f",
                     epoch, lr, report.epoch_nll[-1], report.holdout_nll[-1])

    logger.info("flow training done, holdout NLL %.4f -> %.4f",
                report.initial_holdout_nll, report.final_holdout_nll)
    return report


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

def save_flow(model: FlowModel, path: str | Path) -> None:
    arrays = [(name, model.params[name].data, model.params.is_trainable(name)) for name in model.params]
    write_checkpoint(path, FLOW_MAGIC, model.manifest(), arrays)


def load_flow(path: str | Path) -> FlowModel:
    manifest, arrays = read_checkpoint(path, FLOW_MAGIC)
    try:
        raw = dict(manifest["config"])
        raw["input_shape"] = tuple(raw["input_shape"])
        config = FlowConfig(**raw)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"flow manifest has no usable config: {exc}", 10) from None
    model = init_flow(config)
    if model.manifest()["layers"] != manifest.get("layers"):
        raise FormatError("flow manifest layers do not match the configured architecture", 10)
    expected = [(n, model.params[n].shape, model.params.is_trainable(n)) for n in model.params]
    found = [(n, a.shape, t) for n, a, t in arrays]
    if expected != found:
        raise FormatError("flow checkpoint parameters do not match the manifest architecture", 10)
    params = ParamSet()
    for name, arr, trainable in arrays:
        params.add(name, arr, trainable=trainable)
    model.params = params
    logger.info("loaded %s flow from %s", config.kind, path)
    return model
