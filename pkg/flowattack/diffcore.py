"""Minimal reverse-mode differentiation over numpy arrays.

Tensors wrap read-only numpy arrays (float32 unless a :func:`precision` context
says otherwise). Every primitive computes its value eagerly and, when a
:class:`Tape` is active and one of its inputs is tracked by that tape, records a
vector-Jacobian product closure. :func:`backward` replays the records in reverse.

    params = ParamSet()
    w = params.add("w", np.ones((3, 2)))
    with Tape() as tape:
        tape.watch(params)
        loss = mean(power(matmul(x, params["w"]), 2))
    grads = backward(loss, tape)      # {"w": ndarray of shape (3, 2)}
"""
from __future__ import annotations

import contextlib
import contextvars
import logging
import math
import threading
from collections.abc import Callable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any, NamedTuple

import numpy as np
from scipy import special

from .errors import ContractError, DomainError, NumericError, ShapeError, TapeError

logger = logging.getLogger(__name__)

_DTYPE: contextvars.ContextVar[type] = contextvars.ContextVar("flowattack_dtype", default=np.float32)
_LOG_2PI = math.log(2.0 * math.pi)

ArrayLike = Any


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Evaluate every primitive inside the block with ``dtype`` storage."""
    token = _DTYPE.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.reset(token)


def current_dtype() -> type:
    return _DTYPE.get()


def _check_finite(primitive: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{primitive} produced non-finite values")


class Tensor:
    """Immutable dense array with shape metadata."""

    __slots__ = ("data",)

    def __init__(self, data: ArrayLike):
        arr = np.array(data, dtype=_DTYPE.get())
        _check_finite("tensor", arr)
        arr.setflags(write=False)
        self.data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        arr = np.asarray(arr, dtype=_DTYPE.get())
        if arr.flags.writeable:
            arr.setflags(write=False)
        out.data = arr
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)


def _lift(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# --------------------------------------------------------------------------
# Parameters
# --------------------------------------------------------------------------

class ParamSet(Mapping[str, Tensor]):
    """Named parameters, each trainable or frozen."""

    def __init__(self) -> None:
        self._entries: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value: ArrayLike, *, trainable: bool = True) -> Tensor:
        if name in self._entries:
            raise ContractError(f"parameter {name!r} already exists")
        tensor = _lift(value) if not isinstance(value, Tensor) else value
        self._entries[name] = tensor
        self._trainable[name] = trainable
        return tensor

    def assign(self, name: str, value: ArrayLike) -> Tensor:
        current = self._entries[name]
        if not self._trainable[name]:
            raise ContractError(f"parameter {name!r} is frozen")
        tensor = Tensor(value)
        if tensor.shape != current.shape:
            raise ShapeError("assign", current.shape, tensor.shape)
        self._entries[name] = tensor
        return tensor

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable_names(self) -> list[str]:
        return [n for n, flag in self._trainable.items() if flag]

    def num_values(self) -> int:
        return int(np.sum([t.size for t in self._entries.values()], dtype=np.int64))

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------

class _Record(NamedTuple):
    output: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


class Tape:
    """Operation graph of one forward pass."""

    def __init__(self) -> None:
        self._records: list[_Record] = []
        self._tracked: dict[int, Tensor] = {}
        self._watched: dict[str, Tensor] = {}
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def watch(self, target: ParamSet | Tensor, name: str | None = None) -> None:
        if isinstance(target, ParamSet):
            for key in target.trainable_names():
                self._watch_one(key, target[key])
            return
        if name is None:
            raise ContractError("watching a bare tensor needs a name")
        self._watch_one(name, target)

    def _watch_one(self, name: str, tensor: Tensor) -> None:
        if name in self._watched:
            raise ContractError(f"{name!r} is already watched")
        self._watched[name] = tensor
        self._tracked[id(tensor)] = tensor

    def is_tracked(self, tensor: Tensor) -> bool:
        return id(tensor) in self._tracked

    @property
    def num_records(self) -> int:
        return len(self._records)

    def _record(self, output: Tensor, inputs: tuple[Tensor, ...], vjp) -> None:
        self._records.append(_Record(output, inputs, vjp))
        self._tracked[id(output)] = output


def _emit(primitive: str, value: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    _check_finite(primitive, value)
    out = Tensor._wrap(value)
    stack = _tape_stack()
    if stack:
        tape = stack[-1]
        if any(tape.is_tracked(t) for t in inputs):
            tape._record(out, inputs, vjp)
    return out


def backward(loss: Tensor, tape: Tape) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` for every tensor watched by ``tape``.

    Watched tensors the loss does not reach get zero gradients. The loss itself must
    depend on at least one watched tensor: a loss built only from constants is never
    recorded, so it raises :class:`TapeError` just like a loss computed outside the tape.
    """
    if tape._consumed:
        raise TapeError("tape already consumed by backward; run a new forward pass")
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.is_tracked(loss):
        raise TapeError("loss was not produced under this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=np.float64)}
    for record in reversed(tape._records):
        g = grads.pop(id(record.output), None)
        if g is None:
            continue
        for inp, gi in zip(record.inputs, record.vjp(g)):
            if gi is None or not tape.is_tracked(inp):
                continue
            key = id(inp)
            grads[key] = grads[key] + gi if key in grads else gi

    tape._consumed = True
    out = {}
    for name, tensor in tape._watched.items():
        g = grads.get(id(tensor))
        if g is None:
            out[name] = np.zeros(tensor.shape, dtype=tensor.data.dtype)
        else:
            out[name] = np.asarray(g, dtype=tensor.data.dtype).reshape(tensor.shape)
    return out


# --------------------------------------------------------------------------
# Primitives
# --------------------------------------------------------------------------

def _broadcast(primitive: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(a.shape, b.shape))
    except ValueError:
        raise ShapeError(primitive, a.shape, b.shape) from None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return _emit("matmul", ad @ bd, (a, b), vjp)


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast("add", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", a.data + b.data, (a, b), vjp)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast("sub", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", a.data - b.data, (a, b), vjp)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _emit("mul", ad * bd, (a, b), vjp)


def tanh(x: ArrayLike) -> Tensor:
    x = _lift(x)
    y = np.tanh(x.data)
    return _emit("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def arctan(x: ArrayLike) -> Tensor:
    x = _lift(x)
    xd = x.data
    return _emit("arctan", np.arctan(xd), (x,), lambda g: (g / (1.0 + xd * xd),))


def exp(x: ArrayLike) -> Tensor:
    x = _lift(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return _emit("exp", y, (x,), lambda g: (g * y,))


def log(x: ArrayLike) -> Tensor:
    x = _lift(x)
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(xd)
    return _emit("log", y, (x,), lambda g: (g / xd,))


def leaky_relu(x: ArrayLike, slope: float) -> Tensor:
    x = _lift(x)
    positive = x.data > 0
    y = np.where(positive, x.data, slope * x.data)
    return _emit("leaky_relu", y, (x,), lambda g: (g * np.where(positive, 1.0, slope),))


def softplus(x: ArrayLike) -> Tensor:
    x = _lift(x)
    xd = x.data
    return _emit("softplus", np.logaddexp(0.0, xd), (x,), lambda g: (g * special.expit(xd),))


def reshape(x: ArrayLike, shape: tuple[int, ...]) -> Tensor:
    x = _lift(x)
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None
    return _emit("reshape", y, (x,), lambda g: (g.reshape(old),))


def power(x: ArrayLike, exponent: float) -> Tensor:
    x = _lift(x)
    xd = x.data
    p = float(exponent)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.power(xd, p)
    return _emit("power", y, (x,), lambda g: (g * p * np.power(xd, p - 1.0),))


def _axis_size(shape: tuple[int, ...], axis) -> int:
    if axis is None:
        return int(np.prod(shape, dtype=np.int64))
    axes = axis if isinstance(axis, tuple) else (axis,)
    return int(np.prod([shape[a] for a in axes], dtype=np.int64))


def _expand_back(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


def sum(x: ArrayLike, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _lift(x)
    shape = x.shape
    # float64 accumulation, stored back at the working precision
    y = np.sum(x.data, axis=axis, dtype=np.float64, keepdims=keepdims)
    return _emit("sum", y, (x,), lambda g: (_expand_back(g, shape, axis, keepdims),))


def mean(x: ArrayLike, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    shape = x.shape
    count = _axis_size(shape, axis)
    if count == 0:
        raise ContractError("mean over an empty axis")
    y = np.sum(x.data, axis=axis, dtype=np.float64, keepdims=keepdims) / count
    return _emit("mean", y, (x,), lambda g: (_expand_back(g, shape, axis, keepdims) / count,))


def softmax_cross_entropy(logits: ArrayLike, labels: ArrayLike) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under ``softmax(logits)``."""
    logits = _lift(logits)
    lab = np.atleast_1d(np.asarray(labels)).astype(np.int64)
    ld = logits.data if logits.ndim == 2 else logits.data.reshape(1, -1)
    if ld.ndim != 2 or ld.shape[0] != lab.shape[0]:
        raise ShapeError("softmax_cross_entropy", logits.shape, lab.shape)
    k = ld.shape[1]
    if lab.size and (lab.min() < 0 or lab.max() >= k):
        raise ContractError(f"softmax_cross_entropy: labels must lie in [0, {k})")
    n = ld.shape[0]
    logp = special.log_softmax(ld.astype(np.float64), axis=1)
    rows = np.arange(n)
    value = -np.sum(logp[rows, lab]) / n
    shape = logits.shape

    def vjp(g):
        grad = np.exp(logp)
        grad[rows, lab] -= 1.0
        return ((g * grad / n).reshape(shape),)

    return _emit("softmax_cross_entropy", np.asarray(value), (logits,), vjp)


def gaussian_log_density(x: ArrayLike, mean: ArrayLike = 0.0, std: ArrayLike = 1.0) -> Tensor:
    """Elementwise log N(x | mean, std^2)."""
    x, m, s = _lift(x), _lift(mean), _lift(std)
    if np.any(s.data <= 0):
        raise DomainError("gaussian_log_density: std must be positive")
    _broadcast("gaussian_log_density", x, m)
    _broadcast("gaussian_log_density", x, s)
    diff = x.data - m.data
    sd = s.data
    y = -0.5 * (diff / sd) ** 2 - np.log(sd) - 0.5 * _LOG_2PI

    def vjp(g):
        gx = -g * diff / sd ** 2
        gs = g * (diff ** 2 / sd ** 3 - 1.0 / sd)
        return (_unbroadcast(gx, x.shape), _unbroadcast(-gx, m.shape), _unbroadcast(gs, s.shape))

    return _emit("gaussian_log_density", y, (x, m, s), vjp)


def take(x: ArrayLike, indices: ArrayLike, axis: int = -1) -> Tensor:
    """Gather entries of ``x`` along ``axis`` (feature splits and permutations)."""
    x = _lift(x)
    idx = np.asarray(indices, dtype=np.int64)
    extent = x.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= extent):
        raise ShapeError("take", x.shape, idx.shape)
    shape = x.shape
    ax = axis % x.ndim

    def vjp(g):
        grad = np.zeros(shape, dtype=g.dtype)
        index = (slice(None),) * ax + (idx,)
        np.add.at(grad, index, g)
        return (grad,)

    return _emit("take", np.take(x.data, idx, axis=ax), (x,), vjp)


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    parts = tuple(_lift(t) for t in tensors)
    if not parts:
        raise ContractError("concat needs at least one tensor")
    ax = axis % parts[0].ndim
    for p in parts[1:]:
        if p.ndim != parts[0].ndim or any(
            a != b for i, (a, b) in enumerate(zip(p.shape, parts[0].shape)) if i != ax
        ):
            raise ShapeError("concat", parts[0].shape, p.shape)
    offsets = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=ax))

    return _emit("concat", np.concatenate([p.data for p in parts], axis=ax), parts, vjp)


# --------------------------------------------------------------------------
# Verification and optimisation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class GradCheckReport:
    deviations: dict[str, float]
    tol: float

    @property
    def passed(self) -> bool:
        return all(dev <= self.tol for dev in self.deviations.values())

    @property
    def worst(self) -> float:
        return max(self.deviations.values(), default=0.0)


def grad_check(
    fn: Callable[[], Tensor],
    params: ParamSet,
    step: float = 1e-3,
    tol: float = 1e-3,
    *,
    floor: float = 1e-3,
    max_entries: int | None = None,
    seed: int = 0,
    analytic: Mapping[str, np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare backward gradients of ``fn`` against central finite differences.

    ``fn`` must read its parameters from ``params`` on every call. The check runs
    in float64; deviations are ``|a - n| / max(|a|, |n|, floor)``. Passing
    ``analytic`` checks the supplied gradients instead of computing them.
    """
    if not 0.0 < step < 1.0:
        raise DomainError(f"grad_check: step must lie in (0, 1), got {step}")
    if tol <= 0:
        raise DomainError(f"grad_check: tol must be positive, got {tol}")

    names = params.trainable_names()
    originals = {n: params[n] for n in names}
    rng = np.random.default_rng(seed)
    deviations: dict[str, float] = {}

    def scalar() -> float:
        out = fn()
        if not isinstance(out, Tensor) or out.size != 1:
            raise ContractError("grad_check: fn must return a scalar Tensor")
        return float(out.data.reshape(()))

    try:
        with precision(np.float64):
            for n in names:
                params._entries[n] = Tensor(originals[n].data)
            if analytic is None:
                with Tape() as tape:
                    tape.watch(params)
                    loss = fn()
                if not isinstance(loss, Tensor) or loss.size != 1:
                    raise ContractError("grad_check: fn must return a scalar Tensor")
                if not names:
                    return GradCheckReport({}, tol)
                grads = backward(loss, tape) if tape.is_tracked(loss) else {
                    n: np.zeros(params[n].shape) for n in names
                }
            else:
                scalar()
                grads = {n: np.asarray(analytic[n], dtype=np.float64) for n in names}

            for n in names:
                base = np.array(params[n].data, dtype=np.float64)
                positions = np.arange(base.size)
                if max_entries is not None and base.size > max_entries:
                    positions = np.sort(rng.choice(base.size, size=max_entries, replace=False))
                worst = 0.0
                for pos in positions:
                    bumped = base.copy()
                    bumped.flat[pos] += step
                    params._entries[n] = Tensor(bumped)
                    upper = scalar()
                    bumped.flat[pos] -= 2.0 * step
                    params._entries[n] = Tensor(bumped)
                    lower = scalar()
                    params._entries[n] = Tensor(base)
                    numeric = (upper - lower) / (2.0 * step)
                    a = float(grads[n].flat[pos])
                    worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
                deviations[n] = worst
    finally:
        for n, t in originals.items():
            params._entries[n] = t

    report = GradCheckReport(deviations, tol)
    logger.debug("grad_check worst deviation %.3e over %d parameters", report.worst, len(names))
    return report


def numeric_jacobian(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central-difference Jacobian of a vector function, evaluated in float64."""
    x = np.asarray(x, dtype=np.float64).ravel()
    with precision(np.float64):
        base = np.asarray(fn(x), dtype=np.float64).ravel()
        jac = np.empty((base.size, x.size))
        for j in range(x.size):
            hi = x.copy()
            lo = x.copy()
            hi[j] += step
            lo[j] -= step
            jac[:, j] = (np.asarray(fn(hi), dtype=np.float64).ravel()
                         - np.asarray(fn(lo), dtype=np.float64).ravel()) / (2.0 * step)
    return jac


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: ParamSet, grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float, weight_decay: float = 0.0) -> AdamState:
    """One Adam update with decoupled weight decay on the trainable entries."""
    if lr <= 0:
        raise DomainError(f"adam_step: lr must be positive, got {lr}")
    t = state.step + 1
    m_new: dict[str, np.ndarray] = {}
    v_new: dict[str, np.ndarray] = {}
    for name in params.trainable_names():
        if name not in grads:
            raise ContractError(f"adam_step: no gradient for {name!r}")
        theta = params[name].data.astype(np.float64)
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != theta.shape:
            raise ShapeError("adam_step", theta.shape, g.shape)
        m = state.m.get(name, np.zeros_like(theta))
        v = state.v.get(name, np.zeros_like(theta))
        if m.shape != theta.shape:
            raise ShapeError("adam_step", theta.shape, m.shape)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        theta = theta - lr * (m_hat / (np.sqrt(v_hat) + state.eps) + weight_decay * theta)
        params.assign(name, theta)
        m_new[name] = m
        v_new[name] = v
    return AdamState(step=t, m=m_new, v=v_new, beta1=state.beta1, beta2=state.beta2, eps=state.eps)
