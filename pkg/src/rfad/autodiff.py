"""Dense-tensor arithmetic with reverse-mode automatic differentiation.

Tensors store float32 by default (float64 is supported for high-precision
check builds). Reductions accumulate in float64 and cast back to the
storage dtype. Operations record onto the innermost active ``GradTape``
whenever any input requires a gradient; with no active tape they are plain
numpy computations.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError, NumericError

_ALLOWED_DTYPES = (np.float32, np.float64)
_TAPES = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TAPES, "stack", None)
    if stack is None:
        stack = []
        _TAPES.stack = stack
    return stack


def _active_tape() -> Optional["GradTape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense array plus gradient metadata.

    ``requires_grad`` marks trainable leaves; tensors produced by ops
    inherit it from their inputs so recording can stop early on constant
    subgraphs.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        else:
            arr = np.asarray(data)
            if arr.dtype not in _ALLOWED_DTYPES:
                arr = arr.astype(np.float32)
            elif (arr.dtype == np.float64
                  and not isinstance(data, (np.ndarray, np.generic))):
                # plain Python containers/scalars default to 32-bit storage
                arr = arr.astype(np.float32)
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar -------------------------------------------------
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], vjp: Callable):
        self.out = out
        self.inputs = tuple(inputs)
        self.vjp = vjp


class GradTape:
    """Ordered record of executed ops for one reverse-mode pass.

    Use as a context manager; ``backward`` walks the record once in
    reverse execution order, accumulates gradients, writes ``.grad`` on
    every ``requires_grad`` leaf reached from the loss, and consumes the
    tape.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._produced: set[int] = set()
        self._consumed = False
        self.nodes_recorded = 0
        self.nodes_visited = 0

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def _record(self, out: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> None:
        if self._consumed:
            raise ContractError("tape already consumed by backward()")
        self._nodes.append(_Node(out, inputs, vjp))
        self._produced.add(id(out))
        self.nodes_recorded += 1

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Reverse pass from a scalar loss; returns grads keyed by id(leaf)."""
        if self._consumed:
            raise ContractError("tape already consumed by backward()")
        if loss.data.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.data.shape}")
        if not np.all(np.isfinite(loss.data)):
            raise NumericError("loss is not finite")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaf_grads: dict[int, np.ndarray] = {}
        leaves: dict[int, Tensor] = {}
        if loss.requires_grad and id(loss) not in self._produced:
            leaf_grads[id(loss)] = grads[id(loss)]
            leaves[id(loss)] = loss

        for node in reversed(self._nodes):
            self.nodes_visited += 1
            gout = grads.pop(id(node.out), None)
            if gout is None:
                continue
            for tensor, gin in zip(node.inputs, node.vjp(gout)):
                if gin is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in self._produced:
                    acc = grads.get(key)
                    grads[key] = gin if acc is None else acc + gin
                else:
                    acc = leaf_grads.get(key)
                    leaf_grads[key] = gin if acc is None else acc + gin
                    leaves[key] = tensor

        for key, grad in leaf_grads.items():
            tensor = leaves[key]
            tensor.grad = grad.astype(tensor.dtype, copy=False)
        self._nodes.clear()
        self._produced.clear()
        return leaf_grads


def _as_tensor(value, peer_dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=peer_dtype))


def _result_dtype(*tensors: Tensor):
    return np.result_type(*(t.dtype for t in tensors))


def _finish(out_data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    if requires:
        tape = _active_tape()
        if tape is not None:
            tape._record(out, inputs, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum out dimensions that numpy broadcasting introduced or stretched."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# elementwise arithmetic ---------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, np.float32 if not isinstance(b, Tensor) else b.dtype)
    b = _as_tensor(b, a.dtype)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _finish(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, np.float32 if not isinstance(b, Tensor) else b.dtype)
    b = _as_tensor(b, a.dtype)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _finish(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, np.float32 if not isinstance(b, Tensor) else b.dtype)
    b = _as_tensor(b, a.dtype)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _finish(out, (a, b), vjp)


def div(a, b) -> Tensor:
    a = _as_tensor(a, np.float32 if not isinstance(b, Tensor) else b.dtype)
    b = _as_tensor(b, a.dtype)
    out = a.data / b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return (
            _unbroadcast(g / bd, a.shape),
            _unbroadcast(-g * ad / (bd * bd), b.shape),
        )

    return _finish(out, (a, b), vjp)


def affine(x, scale, shift) -> Tensor:
    """x * scale + shift with broadcasting, as a single recorded op."""
    x = _as_tensor(x, np.float32)
    scale = _as_tensor(scale, x.dtype)
    shift = _as_tensor(shift, x.dtype)
    out = x.data * scale.data + shift.data
    xd, sd = x.data, scale.data

    def vjp(g):
        return (
            _unbroadcast(g * sd, x.shape),
            _unbroadcast(g * xd, scale.shape),
            _unbroadcast(g, shift.shape),
        )

    return _finish(out, (x, scale, shift), vjp)


def matmul(a, b) -> Tensor:
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise ContractError("matmul expects Tensor operands")
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return _finish(out, (a, b), vjp)


# elementwise nonlinearities -----------------------------------------


def texp(x) -> Tensor:
    x = _as_tensor(x, np.float32)
    out = np.exp(x.data)

    def vjp(g):
        return (g * out,)

    return _finish(out, (x,), vjp)


def tlog(x) -> Tensor:
    x = _as_tensor(x, np.float32)
    if np.any(x.data <= 0.0):
        raise DomainError("log requires strictly positive input")
    out = np.log(x.data)
    xd = x.data

    def vjp(g):
        return (g / xd,)

    return _finish(out, (x,), vjp)


def tsqrt(x) -> Tensor:
    x = _as_tensor(x, np.float32)
    if np.any(x.data < 0.0):
        raise DomainError("sqrt requires non-negative input")
    out = np.sqrt(x.data)

    def vjp(g):
        return (g * (0.5 / out),)

    return _finish(out, (x,), vjp)


def relu(x) -> Tensor:
    x = _as_tensor(x, np.float32)
    out = np.maximum(x.data, 0.0)
    mask = x.data > 0.0

    def vjp(g):
        return (g * mask,)

    return _finish(out, (x,), vjp)


def _sigmoid(arr: np.ndarray) -> np.ndarray:
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    ex = np.exp(arr[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x) -> Tensor:
    x = _as_tensor(x, np.float32)
    out = _sigmoid(x.data)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _finish(out, (x,), vjp)


def log_sigmoid(x) -> Tensor:
    """Numerically stable log(sigmoid(x)) = min(x, 0) - log1p(exp(-|x|))."""
    x = _as_tensor(x, np.float32)
    xd = x.data
    out = np.minimum(xd, 0.0) - np.log1p(np.exp(-np.abs(xd)))

    def vjp(g):
        return (g * _sigmoid(-xd),)

    return _finish(out, (x,), vjp)


def atan(x) -> Tensor:
    x = _as_tensor(x, np.float32)
    out = np.arctan(x.data)
    xd = x.data

    def vjp(g):
        return (g / (1.0 + xd * xd),)

    return _finish(out, (x,), vjp)


# reductions (float64 accumulation) ----------------------------------


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x, np.float32)
    out = x.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64)
    out = np.asarray(out, dtype=x.dtype)
    shape, dtype = x.shape, x.dtype

    def vjp(g):
        return (_spread(g, shape, axis, keepdims).astype(dtype, copy=False),)

    return _finish(out, (x,), vjp)


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x, np.float32)
    out = x.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64)
    out = np.asarray(out, dtype=x.dtype)
    shape, dtype = x.shape, x.dtype
    count = x.size if axis is None else np.prod(
        [shape[a] for a in np.atleast_1d(axis)]
    )

    def vjp(g):
        return (_spread(g / count, shape, axis, keepdims).astype(dtype, copy=False),)

    return _finish(out, (x,), vjp)


def _spread(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape).copy() if np.ndim(g) == 0 else np.full(shape, g)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


# structural ops ------------------------------------------------------


def gather_permute(x, indices, axis: int = -1) -> Tensor:
    """Gather slices along ``axis`` (permutations are the bijective case).

    Backward scatter-adds, so repeated indices accumulate.
    """
    x = _as_tensor(x, np.float32)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ContractError("indices must be 1-D")
    norm_axis = axis if axis >= 0 else x.ndim + axis
    if norm_axis not in (0, x.ndim - 1):
        raise ContractError("gather_permute supports the first or last axis")
    extent = x.shape[norm_axis]
    if idx.size and (idx.min() < 0 or idx.max() >= extent):
        raise DimensionError(f"index out of range for axis extent {extent}")
    out = np.take(x.data, idx, axis=norm_axis)
    shape, dtype, last = x.shape, x.dtype, norm_axis == x.ndim - 1

    def vjp(g):
        gx = np.zeros(shape, dtype=g.dtype)
        if last:
            np.add.at(gx, (Ellipsis, idx), g)
        else:
            np.add.at(gx, idx, g)
        return (gx.astype(dtype, copy=False),)

    return _finish(out, (x,), vjp)


class BatchNormState:
    """Running statistics and settings for one batch-norm channel group."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x, gamma, beta, state: BatchNormState, training: bool) -> Tensor:
    """Batch normalization over axis 0 of a 2-D (rows, channels) tensor.

    Training mode normalizes with (biased) batch statistics and updates the
    running estimates; eval mode uses the running estimates.
    """
    x = _as_tensor(x, np.float32)
    gamma = _as_tensor(gamma, x.dtype)
    beta = _as_tensor(beta, x.dtype)
    if x.ndim != 2:
        raise DimensionError("batch_norm expects a 2-D (rows, channels) tensor")
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError("scale/shift must have one entry per channel")
    eps = state.eps
    n = x.shape[0]
    xd = x.data

    if training:
        mu = xd.mean(axis=0, dtype=np.float64)
        var = xd.var(axis=0, dtype=np.float64)
        unbiased = var * n / (n - 1) if n > 1 else var
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean + m * mu).astype(
            state.running_mean.dtype)
        state.running_var = ((1 - m) * state.running_var + m * unbiased).astype(
            state.running_var.dtype)
    else:
        mu = state.running_mean.astype(np.float64)
        var = state.running_var.astype(np.float64)

    ivar = 1.0 / np.sqrt(var + eps)
    xhat = ((xd - mu) * ivar).astype(xd.dtype)
    out = gamma.data * xhat + beta.data
    gd = gamma.data
    ivar_t = ivar.astype(xd.dtype)

    def vjp(g):
        dgamma = (g * xhat).sum(axis=0, dtype=np.float64).astype(gd.dtype)
        dbeta = g.sum(axis=0, dtype=np.float64).astype(gd.dtype)
        dxhat = g * gd
        if training:
            dx = (ivar_t / n) * (
                n * dxhat
                - dxhat.sum(axis=0)
                - xhat * (dxhat * xhat).sum(axis=0)
            )
        else:
            dx = dxhat * ivar_t
        return dx.astype(xd.dtype, copy=False), dgamma, dbeta

    return _finish(out, (x, gamma, beta), vjp)


# parameter helpers ---------------------------------------------------


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def uniform_fan_in(rng: np.random.Generator, fan_in: int, shape,
                   dtype=np.float32) -> Tensor:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initializer for weights."""
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return parameter(rng.uniform(-bound, bound, size=shape), dtype=dtype)
