"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array.  Operations on tensors that require
gradients record a closure computing the vector-Jacobian product; calling
``backward`` on a scalar sweeps the recorded graph in reverse topological
order and accumulates ``.grad`` on every tensor that asked for it.

Storage is float32 by default.  float64 tensors are supported so that
gradient checks can run the very same code path at higher precision.
"""

from __future__ import annotations

import contextlib
import math
import os
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_state = {
    "grad_enabled": True,
    "debug": os.environ.get("SUNDIAL_DEBUG", "") not in ("", "0"),
    "mult_count": 0,
}

_GELU_C = math.sqrt(2.0 / math.pi)


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


def is_grad_enabled() -> bool:
    return _state["grad_enabled"]


def set_debug(flag: bool) -> None:
    """Toggle finiteness assertions after every op."""
    _state["debug"] = bool(flag)


@contextlib.contextmanager
def debug_mode(flag: bool = True):
    prev = _state["debug"]
    _state["debug"] = flag
    try:
        yield
    finally:
        _state["debug"] = prev


def mult_count() -> int:
    """Scalar multiplies performed by matmul since the last reset (a FLOP proxy)."""
    return _state["mult_count"]


def reset_mult_count() -> None:
    _state["mult_count"] = 0


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    nlead = grad.ndim - len(shape)
    if nlead > 0:
        grad = grad.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        # always own a fresh buffer so callers can't alias our storage
        self.data = np.array(arr, dtype=dtype, copy=True)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = False
        t._parents = ()
        t._backward = None
        t.name = None
        return t

    @staticmethod
    def make(data: np.ndarray, parents: Sequence["Tensor"], backward: Callable[[np.ndarray], Sequence]) -> "Tensor":
        """Build a result tensor from raw output data.

        ``backward(g)`` must return one gradient (or None) per parent, each of
        the parent's shape.  Use this to define fused ops outside this module.
        """
        if _state["debug"] and not np.all(np.isfinite(data)):
            raise FloatingPointError(f"non-finite values produced (shape {data.shape})")
        out = Tensor._wrap(data)
        if _state["grad_enabled"] and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)

            def _bw(g, parents=out._parents):
                grads = backward(g)
                for p, pg in zip(parents, grads):
                    if pg is None or not p.requires_grad:
                        continue
                    if p.grad is None:
                        p.grad = np.array(pg, dtype=p.data.dtype, copy=True)
                    else:
                        p.grad += pg

            out._backward = _bw
        return out

    # -- basic properties -----------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self.shape)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff -------------------------------------------------------------

    def backward(self) -> None:
        """Populate ``.grad`` on every reachable tensor that requires it.

        The recorded graph is released afterwards; calling backward twice
        accumulates into existing grads only if the graph was rebuilt.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        seed = np.ones_like(self.data)
        self.grad = seed if self.grad is None else self.grad + seed
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            node._backward(node.grad)
        # free the graph; intermediate grads are not kept
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node.grad = None

    # -- arithmetic -----------------------------------------------------------

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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

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
        return swapaxes(self, -1, -2)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def tanh(self):
        return tanh(self)


def _raise_not_scalar(shape):
    raise ContractError(f"item() needs a single element, got shape {shape}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is None:
        dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
    return Tensor._wrap(np.asarray(arr, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor._wrap(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor._wrap(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return Tensor.make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return Tensor.make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return Tensor.make(
        ad * bd,
        (a, b),
        lambda g: (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def bw(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.make(out, (a, b), bw)


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    out = ad ** p
    return Tensor.make(out, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor.make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return Tensor.make(out, (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor.make(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor.make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor.make(np.maximum(ad, 0), (a,), lambda g: (g * (ad > 0),))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return Tensor.make(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a: Tensor) -> Tensor:
    ad = a.data
    s = 1.0 / (1.0 + np.exp(-ad))
    return Tensor.make(ad * s, (a,), lambda g: (g * s * (1.0 + ad * (1.0 - s)),))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return Tensor.make(out, (a,), bw)


# -- reductions ---------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return Tensor.make(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([shape[i] for i in axes])) if axes else 1
    out = np.mean(a.data, axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape),)

    return Tensor.make(np.asarray(out), (a,), bw)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor.make(out, (a,), bw)


def layer_norm(a: Tensor, weight: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis; statistics accumulated in float64."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True, dtype=np.float64)
    var = np.mean((x - mu) ** 2, axis=-1, keepdims=True, dtype=np.float64)
    rstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = ((x - mu) * rstd).astype(x.dtype)
    out = xhat
    if weight is not None:
        out = out * weight.data
    if bias is not None:
        out = out + bias.data
    parents = [a] + [p for p in (weight, bias) if p is not None]
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        gx = g * weight.data if weight is not None else g
        gx = rstd * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if weight is not None:
            grads.append((g * xhat).sum(axis=lead) if lead else g * xhat)
        if bias is not None:
            grads.append(g.sum(axis=lead) if lead else g)
        return grads

    return Tensor.make(out, parents, bw)


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise DimensionError(f"matmul batch extents not broadcastable: {a.shape} x {b.shape}") from e
    _state["mult_count"] += int(np.prod(out.shape)) * a.shape[-1]
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.make(out, (a, b), bw)


# -- shape ops ----------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return Tensor.make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    # materialize so downstream ops see contiguous row-major data
    return Tensor.make(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def getitem(a: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        idx = idx.data
    out = np.array(a.data[idx], copy=True)
    shape, dtype = a.shape, a.dtype
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return Tensor.make(out, (a,), bw)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def take_rows(a: Tensor, rows: np.ndarray) -> Tensor:
    """Gather along axis 0 with an integer index array (repeats allowed)."""
    rows = np.asarray(rows, dtype=np.int64)
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, rows, g)
        return (full,)

    return Tensor.make(a.data[rows], (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor.make(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def split(a: Tensor, n: int, axis: int = -1) -> list[Tensor]:
    """Split into ``n`` equal chunks along ``axis``."""
    axis = axis % a.ndim
    size = a.shape[axis]
    if size % n:
        raise DimensionError(f"cannot split extent {size} into {n} equal parts")
    step = size // n
    out = []
    for i in range(n):
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(i * step, (i + 1) * step)
        out.append(getitem(a, tuple(sl)))
    return out


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = _pair(a, b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    return Tensor.make(
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0), sa), _unbroadcast(np.where(cond, 0, g), sb)),
    )


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
