"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable primitive records its parents and a closure that maps the
output gradient to parent gradients. ``Tensor.backward`` walks the recorded
graph once in reverse topological order.

Broadcasting is limited to what numpy does for a leading batch dimension and
size-1 axes; gradients are summed back to the operand shape.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from graphbid.errors import ConfigurationError, DimensionError

_STATE = {"dtype": np.float32, "grad_enabled": True}


def get_default_dtype():
    return _STATE["dtype"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ConfigurationError(f"unsupported precision {dtype!r}")
    _STATE["dtype"] = dtype


@contextmanager
def precision(dtype):
    """Temporarily switch the default floating precision."""
    old = _STATE["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _STATE["dtype"] = old


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    old = _STATE["grad_enabled"]
    _STATE["grad_enabled"] = False
    try:
        yield
    finally:
        _STATE["grad_enabled"] = old


def is_grad_enabled() -> bool:
    return _STATE["grad_enabled"]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _STATE["dtype"])
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ------------------------------------------------------------
    def backward(self, grad=None) -> list["Tensor"]:
        """Accumulate gradients into every reachable tensor that requires them.

        Returns the visited non-leaf tensors in the order their backward
        closures ran (used by tests to audit the traversal).
        """
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        self.grad = np.asarray(grad, dtype=self.data.dtype).copy() if self.grad is None \
            else self.grad + grad
        visited = []
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            node._backward(node.grad)
            visited.append(node)
        return visited

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        t.grad = g.copy() if g.base is not None or g is t.data else g
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype if data.dtype.kind == "f" else None)
    if _STATE["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"cannot combine shapes {a.shape} and {b.shape}") from exc


# -- elementwise arithmetic -------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * out_data / b.data, b.shape))

    return _make(out_data, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: _accumulate(a, -g), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)

    def backward(g):
        _accumulate(a, g * exponent * a.data ** (exponent - 1.0))

    return _make(a.data ** exponent, (a,), backward, "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)
    return _make(out_data, (a,), lambda g: _accumulate(a, g * out_data), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: _accumulate(a, g / a.data), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)
    return _make(out_data, (a,), lambda g: _accumulate(a, g * 0.5 / out_data), "sqrt")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)
    return _make(out_data, (a,), lambda g: _accumulate(a, g * (1.0 - out_data ** 2)), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out_data = _sigmoid(a.data)
    return _make(out_data, (a,), lambda g: _accumulate(a, g * out_data * (1.0 - out_data)),
                 "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: _accumulate(a, g * mask), "relu")


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope).astype(a.data.dtype)
    return _make(a.data * factor, (a,), lambda g: _accumulate(a, g * factor), "leaky_relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        _accumulate(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner))

    return _make(out_data, (a,), backward, "gelu")


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    out_data = a.data * s
    return _make(out_data, (a,), lambda g: _accumulate(a, g * (s + a.data * s * (1.0 - s))),
                 "silu")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out_data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(out_data, (a,), lambda g: _accumulate(a, g * _sigmoid(x)), "softplus")


# -- reductions and shape ops -------------------------------------------------
def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(np.asarray(out_data), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: _accumulate(a, g.reshape(a.shape)),
                 "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,),
                 lambda g: _accumulate(a, np.transpose(g, inverse)), "transpose")


def swap_last(a) -> Tensor:
    axes = list(range(as_tensor(a).ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    if isinstance(index, Tensor):
        raise TypeError("index with integer numpy arrays, not tensors")

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        _accumulate(a, full)

    return _make(a.data[index], (a,), backward, "getitem")


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    try:
        out_data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(index)])

    return _make(out_data, tensors, backward, "concat")


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out_data = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                _accumulate(t, np.take(g, i, axis=axis))

    return _make(out_data, tensors, backward, "stack")


# -- linear algebra -------------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; a leading batch axis may broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make(out_data, (a, b), backward, "matmul")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(a, out_data * (g - dot))

    return _make(out_data, (a,), backward, "softmax")


def conv1d(x, kernels, bias=None) -> Tensor:
    """'Same'-padded cross-correlation along the last (time) axis.

    x is [C_in, T] or [B, C_in, T]; kernels is [C_out, C_in, K] with odd K.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if kernels.ndim != 3:
        raise DimensionError("kernels must be [C_out, C_in, K]")
    c_out, c_in, k = kernels.shape
    if k % 2 == 0:
        raise ConfigurationError(f"conv1d kernel width must be odd, got {k}")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3 or xd.shape[1] != c_in:
        raise DimensionError(f"conv1d input {x.shape} does not match kernels {kernels.shape}")
    batch, _, length = xd.shape
    pad = k // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad)))
    # cols[b, c*K + j, t] = xp[b, c, t + j]
    cols = np.stack([xp[:, :, j:j + length] for j in range(k)], axis=2)
    cols = cols.reshape(batch, c_in * k, length)
    w2 = kernels.data.reshape(c_out, c_in * k)
    out_data = np.matmul(w2, cols)
    parents = [x, kernels]
    if bias is not None:
        bias = as_tensor(bias)
        out_data = out_data + bias.data[None, :, None]
        parents.append(bias)
    if squeeze:
        out_data = out_data[0]

    def backward(g):
        g3 = g[None] if squeeze else g
        if kernels.requires_grad:
            gw = np.einsum("bot,bct->oc", g3, cols)
            _accumulate(kernels, gw.reshape(kernels.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g3.sum(axis=(0, 2)))
        if x.requires_grad:
            gcols = np.matmul(w2.T, g3).reshape(batch, c_in, k, length)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, :, j:j + length] += gcols[:, :, j, :]
            gx = gxp[:, :, pad:pad + length]
            _accumulate(x, gx[0] if squeeze else gx)

    return _make(out_data, parents, backward, "conv1d")


# -- segment (graph) primitives ------------------------------------------------
def segment_sum(x, segments: np.ndarray, n_segments: int) -> Tensor:
    """out[s] = sum of x[e] over rows e with segments[e] == s."""
    x = as_tensor(x)
    segments = np.asarray(segments, dtype=np.int64)
    if segments.shape[0] != x.shape[0]:
        raise DimensionError("segment ids must match the leading axis")
    out_data = np.zeros((n_segments,) + x.shape[1:], dtype=x.data.dtype)
    np.add.at(out_data, segments, x.data)
    return _make(out_data, (x,), lambda g: _accumulate(x, g[segments]), "segment_sum")


def segment_softmax(scores, segments: np.ndarray, n_segments: int) -> Tensor:
    """Softmax of a 1-D score vector normalised within each segment."""
    scores = as_tensor(scores)
    segments = np.asarray(segments, dtype=np.int64)
    if scores.ndim != 1 or segments.shape != scores.shape:
        raise DimensionError("segment_softmax expects 1-D scores aligned with segment ids")
    s = scores.data
    seg_max = np.full(n_segments, -np.inf, dtype=s.dtype)
    np.maximum.at(seg_max, segments, s)
    e = np.exp(s - seg_max[segments])
    denom = np.zeros(n_segments, dtype=s.dtype)
    np.add.at(denom, segments, e)
    out_data = e / denom[segments]

    def backward(g):
        dot = np.zeros(n_segments, dtype=s.dtype)
        np.add.at(dot, segments, g * out_data)
        _accumulate(scores, out_data * (g - dot[segments]))

    return _make(out_data, (scores,), backward, "segment_softmax")


# -- composite helpers ----------------------------------------------------------
def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    mu = mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = mean(centered * centered, axis=-1, keepdims=True)
    return centered * power(var + eps, -0.5) * gamma + beta


def mse(pred, target) -> Tensor:
    diff = as_tensor(pred) - as_tensor(target)
    return mean(diff * diff)
