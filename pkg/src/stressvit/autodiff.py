"""Dense float64 tensors with a reverse-mode tape and the Adam family.

Everything is a row-major numpy array under the hood. Differentiable
operations record themselves on the active :class:`Tape`; :func:`backward`
replays the tape in reverse and deposits gradients into :class:`Parameter`
objects. With no tape active the same functions run as plain numpy, so
evaluation-mode forward passes carry no graph overhead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """Dense n-dimensional array of 64-bit reals.

    Value-like and freely shareable read-only; operations never mutate
    their inputs. Construction from user data validates finiteness.
    """

    __slots__ = ("data", "_param")

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64, order="C")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor contains non-finite values")
        self.data = arr
        self._param = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        """Internal constructor for op outputs, skips copy and validation."""
        t = cls.__new__(cls)
        t.data = arr
        t._param = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of executed differentiable operations.

    Operations append in execution order, which is automatically
    topological: an op's inputs exist before the op runs. Used as a
    context manager around the forward pass under training.
    """

    def __init__(self):
        self.ops = []  # (out, inputs, grad_fn); grad_fn(g_out) -> per-input grads
        self._prev = None

    def record(self, out, inputs, grad_fn):
        self.ops.append((out, inputs, grad_fn))

    def __enter__(self):
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        self._prev = None
        return False


_ACTIVE_TAPE: Tape | None = None


def record_op(out, inputs, grad_fn):
    """Register a custom differentiable op on the active tape, if any.

    ``grad_fn(grad_out)`` must return one gradient array (or None) per input.
    Modules defining their own primitives (losses, for instance) use this.
    """
    if _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE.record(out, inputs, grad_fn)


_record = record_op


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum out axes that numpy broadcasting introduced or stretched."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor._wrap(a.data + b.data)
    _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor._wrap(a.data - b.data)
    _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor._wrap(a.data * b.data)
    _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )
    return out


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (no gradient for the constant)."""
    out = Tensor._wrap(a.data * c)
    _record(out, (a,), lambda g: (g * c,))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, batched over leading axes by numpy broadcasting."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError(f"matmul needs 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = Tensor._wrap(np.matmul(a.data, b.data))

    def grad_fn(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    _record(out, (a, b), grad_fn)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor._wrap(a.data.reshape(shape))
    _record(out, (a,), lambda g: (g.reshape(a.shape),))
    return out


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor._wrap(np.transpose(a.data, axes))
    _record(out, (a,), lambda g: (np.transpose(g, inverse),))
    return out


def swap_last_axes(a: Tensor) -> Tensor:
    out = Tensor._wrap(np.swapaxes(a.data, -1, -2))
    _record(out, (a,), lambda g: (np.swapaxes(g, -1, -2),))
    return out


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = Tensor._wrap(np.broadcast_to(a.data, shape).copy())
    _record(out, (a,), lambda g: (_unbroadcast(g, a.shape),))
    return out


def concat(tensors, axis: int) -> Tensor:
    tensors = tuple(tensors)
    out = Tensor._wrap(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    _record(out, tensors, grad_fn)
    return out


def select(a: Tensor, axis: int, index: int) -> Tensor:
    """Take one index along an axis, dropping that axis."""
    out = Tensor._wrap(np.take(a.data, index, axis=axis))

    def grad_fn(g):
        full = np.zeros(a.shape)
        idx = [slice(None)] * a.ndim
        idx[axis] = index
        full[tuple(idx)] = g
        return (full,)

    _record(out, (a,), grad_fn)
    return out


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor._wrap(np.sum(a.data, axis=axis, keepdims=keepdims))

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    _record(out, (a,), grad_fn)
    return out


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# neural-network primitives


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, stabilised by max subtraction."""
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    a = e / np.sum(e, axis=-1, keepdims=True)
    out = Tensor._wrap(a)

    def grad_fn(g):
        dot = np.sum(g * a, axis=-1, keepdims=True)
        return (a * (g - dot),)

    _record(out, (x,), grad_fn)
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Standardise the last axis (population variance) then apply gamma, beta."""
    if eps < 0:
        raise ValueError(f"layer_norm eps must be non-negative, got {eps}")
    mu = np.mean(x.data, axis=-1, keepdims=True)
    centred = x.data - mu
    var = np.mean(centred * centred, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv_std
    out = Tensor._wrap(gamma.data * xhat + beta.data)

    def grad_fn(g):
        dxhat = g * gamma.data
        dx = inv_std * (
            dxhat
            - np.mean(dxhat, axis=-1, keepdims=True)
            - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
        )
        reduce_axes = tuple(range(g.ndim - 1))
        dgamma = np.sum(g * xhat, axis=reduce_axes)
        dbeta = np.sum(g, axis=reduce_axes)
        return dx, dgamma, dbeta

    _record(out, (x, gamma, beta), grad_fn)
    return out


def gelu(x: Tensor) -> Tensor:
    """x * Phi(x) with the exact Gaussian CDF."""
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT1_2))
    out = Tensor._wrap(x.data * cdf)

    def grad_fn(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    _record(out, (x,), grad_fn)
    return out


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Zero elements with probability p and rescale survivors by 1/(1-p).

    Identity when not training or p == 0. Draws one uniform block from
    ``rng`` per call, so mask sequences are reproducible from the seed.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = rng.random(x.shape) >= p
    factor = keep / (1.0 - p)
    out = Tensor._wrap(x.data * factor)
    _record(out, (x,), lambda g: (g * factor,))
    return out


# ---------------------------------------------------------------------------
# parameters, backward, optimizers


class Parameter:
    """A tensor with a gradient slot, trainability flag and Adam state."""

    def __init__(self, value, trainable: bool = True, name: str = ""):
        self.value = value if isinstance(value, Tensor) else Tensor(value)
        self.value._param = self
        self.grad = Tensor._wrap(np.zeros(self.value.shape))
        self.trainable = trainable
        self.name = name
        self.m = Tensor._wrap(np.zeros(self.value.shape))
        self.v = Tensor._wrap(np.zeros(self.value.shape))
        self.step = 0

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.data[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def backward(loss: Tensor, tape: Tape) -> None:
    """Reverse-mode sweep over the tape, depositing parameter gradients.

    Gradients accumulate into ``Parameter.grad`` for trainable leaves
    reachable from ``loss``; non-trainable leaves get exactly zero.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    touched: dict[int, Tensor] = {}
    for out, inputs, grad_fn in reversed(tape.ops):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, grad_fn(g)):
            if gi is None:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if t._param is not None:
                touched[key] = t
    for key, t in touched.items():
        param = t._param
        if param.trainable:
            param.grad.data[...] = grads[key].reshape(param.shape)
        else:
            param.grad.data[...] = 0.0


@dataclass
class OptimizerConfig:
    """Adam family settings; ``weight_decay`` only applies to adamw."""

    kind: str = "adam"  # "adam" | "adamw"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.kind not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")


def optimizer_step(params, config: OptimizerConfig) -> None:
    """One Adam/AdamW update over the trainable parameters.

    AdamW applies decoupled decay (theta <- theta - lr*wd*theta) before the
    moment update; Adam never decays. Bias correction uses the per-parameter
    step counter, which this call increments.
    """
    for p in params:
        if not p.trainable:
            continue
        if config.kind == "adamw" and config.weight_decay != 0.0:
            p.value.data -= config.lr * config.weight_decay * p.value.data
        p.step += 1
        g = p.grad.data
        p.m.data[...] = config.beta1 * p.m.data + (1.0 - config.beta1) * g
        p.v.data[...] = config.beta2 * p.v.data + (1.0 - config.beta2) * (g * g)
        m_hat = p.m.data / (1.0 - config.beta1 ** p.step)
        v_hat = p.v.data / (1.0 - config.beta2 ** p.step)
        p.value.data -= config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
