"""Score-based black-box attacks driven by natural evolution strategies.

All variants share one search loop: a Gaussian N(mu, sigma^2 I) over a search space is
pushed through a candidate map into the l-inf ball around the clean input, every
candidate costs one oracle query, and mu follows the normalized NES gradient of the C&W
loss. The variants differ only in the candidate map:

* ``advflow``  latent space of a normalizing flow, x' = proj(f(z))
* ``highres``  flow trained at a lower resolution, x' = proj(x + up(f(z) - x_low))
* ``nattack``  elementwise tanh map, x' = proj(lo + (hi - lo) (tanh(z) + 1) / 2)

``greedy`` replaces the NES step with the mean of the top-K latent offsets and stops at
the first zero-loss candidate.
"""
from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .blackbox import ClassifierOracle, ToyClassifier, pgd_attack
from .errors import BudgetExhaustedError, ConfigError, ContractError, DomainError
from .flowmodel import FlowModel
from .threat import Bounds, linf_distance, project_linf

logger = logging.getLogger(__name__)

VARIANTS = ("advflow", "greedy", "highres", "nattack", "pgd")
LOG_FLOOR = 1e-12
ARCTANH_SHRINK = 1e-4

__all__ = [
    "VARIANTS", "AttackConfig", "AttackResult", "cw_loss", "project_linf", "nes_gradient",
    "advflow_attack", "greedy_advflow", "advflow_highres", "nattack", "pgd_reference", "run_attack",
]


@dataclass(frozen=True)
class AttackConfig:
    sigma: float = 0.1
    lr: float = 0.02
    population: int = 20
    max_queries: int = 10000
    epsilon: float = 8 / 255
    check_interval: int = 200
    top_k: int = 4
    seed: int = 0
    variant: str = "advflow"
    bounds: Bounds = (0.0, 1.0)
    mu_init_std: float = 1e-3
    pgd_step: float = 2 / 255
    pgd_iters: int = 20

    def __post_init__(self):
        object.__setattr__(self, "bounds", (float(self.bounds[0]), float(self.bounds[1])))
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown attack variant {self.variant!r}; expected one of {VARIANTS}")
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.population < 2:
            raise ConfigError("population must be >= 2")
        if self.max_queries < self.population:
            raise ConfigError("max_queries must be >= population")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if self.check_interval < self.population or self.check_interval % self.population:
            raise ConfigError("check_interval must be a positive multiple of population")
        if not 1 <= self.top_k <= self.population:
            raise ConfigError("top_k must lie in [1, population]")
        if self.bounds[0] >= self.bounds[1]:
            raise ConfigError(f"bounds must be increasing, got {self.bounds}")
        if self.mu_init_std < 0:
            raise ConfigError("mu_init_std must be >= 0")


@dataclass
class AttackResult:
    """Outcome of one attack.

    ``total_queries`` counts every oracle query the attack sent, search batches and success
    checks alike, and never exceeds ``max_queries``. ``queries`` equals it on success and is
    ``max_queries`` on failure.
    """

    success: bool
    queries: int
    total_queries: int
    x_adv: np.ndarray | None = None
    loss_trace: list[float] = field(default_factory=list)
    linf: float = 0.0
    degenerate_steps: int = 0

    @property
    def iterations(self) -> int:
        return len(self.loss_trace)


def cw_loss(probs: np.ndarray, y) -> np.ndarray | float:
    """max(log p_y - max_{c != y} log p_c, 0) with log floored at 1e-12.

    Accepts one probability vector (returns a float) or a batch (returns an array).
    """
    p = np.asarray(probs, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    k = p.shape[1]
    labels = np.broadcast_to(np.asarray(y, dtype=np.int64), (p.shape[0],))
    if np.any(labels < 0) or np.any(labels >= k):
        raise ContractError(f"cw_loss: label out of range for {k} classes")
    logp = np.log(np.maximum(p, LOG_FLOOR))
    rows = np.arange(p.shape[0])
    true = logp[rows, labels]
    others = logp.copy()
    others[rows, labels] = -np.inf
    loss = np.maximum(true - others.max(axis=1), 0.0)
    return float(loss[0]) if single else loss


def nes_gradient(losses: np.ndarray, noises: np.ndarray, sigma: float | None = None,
                 normalize: bool = True) -> tuple[np.ndarray, bool]:
    """NES search gradient for the mean of an isotropic Gaussian.

    With ``normalize`` the losses are standardized and the estimate is
    ``mean(L_hat_k * eps_k)``; a zero loss spread gives a zero step and ``True`` as the
    degenerate flag. Without it the plain estimator ``sum(L_k eps_k) / (n sigma)`` is used.
    """
    L = np.asarray(losses, dtype=np.float64).ravel()
    n = len(L)
    if n < 2:
        raise ContractError(f"nes_gradient needs at least 2 samples, got {n}")
    E = np.asarray(noises, dtype=np.float64).reshape(n, -1)
    if normalize:
        # std of identical losses need not round to exactly zero
        if np.ptp(L) == 0.0:
            return np.zeros(E.shape[1]), True
        std = L.std()
        weights = (L - L.mean()) / std
        return weights @ E / n, False
    if sigma is None or sigma <= 0:
        raise DomainError("unnormalized NES needs a positive sigma")
    return L @ E / (n * sigma), False


CandidateMap = Callable[[np.ndarray], np.ndarray]


def _nes_search(cmap: CandidateMap, anchor: np.ndarray, oracle: ClassifierOracle, x: np.ndarray,
                y: int, cfg: AttackConfig) -> AttackResult:
    rng = np.random.default_rng(cfg.seed)
    d = anchor.size
    mu = rng.normal(0.0, cfg.mu_init_std, d)
    n_p = cfg.population
    search = 0
    spent = 0
    trace: list[float] = []
    degenerate = 0

    def check():
        nonlocal spent
        cand = cmap((anchor + mu)[None])[0]
        probs = oracle.query(cand[None])[0]
        spent += 1
        return cand, cw_loss(probs, y) == 0.0

    def done(success: bool, cand: np.ndarray | None) -> AttackResult:
        result = AttackResult(
            success=success,
            queries=spent if success else cfg.max_queries,
            total_queries=spent,
            x_adv=cand if success else None,
            loss_trace=trace,
            linf=linf_distance(cand, x) if success else 0.0,
            degenerate_steps=degenerate,
        )
        logger.debug("%s: success=%s queries=%d iterations=%d", cfg.variant, success,
                      result.queries, len(trace))
        return result

    try:
        cand, ok = check()
        if ok:
            return done(True, cand)
        while True:
            # a batch that ends a check interval must leave room for its check
            pending = int((search + n_p) % cfg.check_interval == 0)
            if spent + n_p + pending > cfg.max_queries:
                break
            eps = rng.standard_normal((n_p, d))
            candidates = cmap(anchor + mu + cfg.sigma * eps)
            losses = cw_loss(oracle.query(candidates), y)
            search += n_p
            spent += n_p
            trace.append(float(losses.mean()))
            grad, flat = nes_gradient(losses, eps)
            if flat:
                degenerate += 1
                logger.debug("degenerate NES step at %d queries", spent)
            mu = mu - cfg.lr * grad
            if pending:
                cand, ok = check()
                if ok:
                    return done(True, cand)
    except BudgetExhaustedError as exc:
        logger.debug("oracle budget ran out: %s", exc)
    return done(False, None)


def _flatten_input(x: np.ndarray) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ContractError("attack input contains non-finite values")
    return arr


def _flow_map(flow: FlowModel, x: np.ndarray, cfg: AttackConfig) -> CandidateMap:
    shape = x.shape

    def cmap(z: np.ndarray) -> np.ndarray:
        decoded = flow.decode(z).astype(np.float64).reshape((len(z), *shape))
        return project_linf(decoded, x, cfg.epsilon, cfg.bounds)

    return cmap


def _check_flow_dims(flow: FlowModel, x: np.ndarray) -> None:
    if x.size != flow.dim:
        raise ContractError(f"flow dimension {flow.dim} does not match input size {x.size}")


def advflow_attack(flow: FlowModel, oracle: ClassifierOracle, x: np.ndarray, y: int,
                   cfg: AttackConfig) -> AttackResult:
    x = _flatten_input(x)
    _check_flow_dims(flow, x)
    z_clean = flow.encode(x[None]).astype(np.float64)[0]
    return _nes_search(_flow_map(flow, x, cfg), z_clean, oracle, x, y, cfg)


def greedy_advflow(flow: FlowModel, oracle: ClassifierOracle, x: np.ndarray, y: int,
                   cfg: AttackConfig) -> AttackResult:
    """Top-K mean update with an early stop at the first zero-loss candidate; no checks."""
    x = _flatten_input(x)
    _check_flow_dims(flow, x)
    z_clean = flow.encode(x[None]).astype(np.float64)[0]
    cmap = _flow_map(flow, x, cfg)
    rng = np.random.default_rng(cfg.seed)
    mu = rng.normal(0.0, cfg.mu_init_std, z_clean.size)
    n_p = cfg.population
    search = 0
    trace: list[float] = []
    try:
        while search + n_p <= cfg.max_queries:
            deltas = mu + cfg.sigma * rng.standard_normal((n_p, z_clean.size))
            candidates = cmap(z_clean + deltas)
            losses = cw_loss(oracle.query(candidates), y)
            search += n_p
            trace.append(float(losses.mean()))
            hits = np.flatnonzero(losses == 0.0)
            if hits.size:
                cand = candidates[hits[0]]
                return AttackResult(True, search, search, cand, trace,
                                    linf_distance(cand, x))
            top = np.argsort(losses, kind="stable")[:cfg.top_k]
            mu = deltas[top].mean(axis=0)
    except BudgetExhaustedError as exc:
        logger.debug("oracle budget ran out: %s", exc)
    return AttackResult(False, cfg.max_queries, search, None, trace)


def _resample(batch: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Bilinear resampling of a batch of images to ``shape`` (per-sample shape)."""
    src = batch.shape[1:]
    factors = [1.0] + [t / s for t, s in zip(shape, src)]
    out = ndimage.zoom(batch, factors, order=1, grid_mode=True, mode="nearest")
    return out.reshape((len(batch), *shape))


def advflow_highres(flow: FlowModel, oracle: ClassifierOracle, x_high: np.ndarray, y: int,
                    cfg: AttackConfig, low_shape: tuple[int, ...] | None = None) -> AttackResult:
    """Attack a high-resolution input through a flow trained at ``low_shape``."""
    x = _flatten_input(x_high)
    low_shape = tuple(flow.input_shape if low_shape is None else low_shape)
    if int(np.prod(low_shape)) != flow.dim:
        raise ContractError(f"low resolution {low_shape} does not match flow dimension {flow.dim}")
    if len(low_shape) != x.ndim or (x.ndim == 3 and low_shape[0] != x.shape[0]):
        raise ContractError(f"cannot resample between {x.shape} and {low_shape}")
    if low_shape == x.shape:
        return advflow_attack(flow, oracle, x, y, cfg)

    x_low = _resample(x[None], low_shape)[0]
    z_clean = flow.encode(x_low[None]).astype(np.float64)[0]

    def cmap(z: np.ndarray) -> np.ndarray:
        gamma = flow.decode(z).astype(np.float64).reshape((len(z), *low_shape)) - x_low
        return project_linf(x + _resample(gamma, x.shape), x, cfg.epsilon, cfg.bounds)

    return _nes_search(cmap, z_clean, oracle, x, y, cfg)


def nattack(oracle: ClassifierOracle, x: np.ndarray, y: int, cfg: AttackConfig) -> AttackResult:
    """NES over the elementwise tanh parameterization of the data range."""
    x = _flatten_input(x)
    lo, hi = cfg.bounds
    unit = np.clip((x - lo) / (hi - lo), ARCTANH_SHRINK, 1.0 - ARCTANH_SHRINK)
    z_clean = np.arctanh(2.0 * unit - 1.0).ravel()
    shape = x.shape

    def cmap(z: np.ndarray) -> np.ndarray:
        data = lo + (hi - lo) * (np.tanh(z) + 1.0) / 2.0
        return project_linf(data.reshape((len(z), *shape)), x, cfg.epsilon, cfg.bounds)

    return _nes_search(cmap, z_clean, oracle, x, y, cfg)


def pgd_reference(classifier: ToyClassifier, x: np.ndarray, y: int, cfg: AttackConfig) -> AttackResult:
    """White-box PGD on the same feasible set; spends no oracle queries."""
    x = _flatten_input(x)
    x_adv = pgd_attack(classifier, x[None], np.array([y]), cfg.epsilon, cfg.pgd_step,
                       cfg.pgd_iters, cfg.bounds)[0]
    success = cw_loss(classifier.probs(x_adv[None])[0], y) == 0.0
    return AttackResult(success, 0, 0, x_adv if success else None, [],
                        linf_distance(x_adv, x) if success else 0.0)


def run_attack(cfg: AttackConfig, oracle: ClassifierOracle, x: np.ndarray, y: int,
               flow: FlowModel | None = None, classifier: ToyClassifier | None = None) -> AttackResult:
    if cfg.variant == "nattack":
        return nattack(oracle, x, y, cfg)
    if cfg.variant == "pgd":
        if classifier is None:
            raise ContractError("the pgd reference needs white-box access to the classifier")
        return pgd_reference(classifier, x, y, cfg)
    if flow is None:
        raise ContractError(f"variant {cfg.variant!r} needs a flow")
    if cfg.variant == "greedy":
        return greedy_advflow(flow, oracle, x, y, cfg)
    if cfg.variant == "highres":
        return advflow_highres(flow, oracle, x, y, cfg)
    return advflow_attack(flow, oracle, x, y, cfg)
