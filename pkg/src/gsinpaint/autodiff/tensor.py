"""Tape-free reverse-mode autodiff over numpy arrays.

Each op builds a ``Tensor`` holding its value, its parents and a closure that
pushes the output gradient back into the parents. ``backward()`` walks the
graph in reverse topological order.

Broadcasting is limited to leading-batch expansion: an operand may omit
leading axes of the other (a bias of shape ``(D,)`` against ``(B, T, D)``),
or be a python scalar. Anything else needs an explicit reshape/concat.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Build values only; no graph, no gradients."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    # -- basics ---------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accum(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True).reshape(self.data.shape)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Populate ``.grad`` on every tracked leaf reachable from this tensor."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() without a gradient needs a scalar root, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
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
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accum(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- operator sugar -------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- elementwise binary ops with leading-batch expansion ---------------------

def _check_batch_shapes(a: np.ndarray, b: np.ndarray, op: str):
    sa, sb = a.shape, b.shape
    if sa == sb or a.ndim == 0 or b.ndim == 0:
        return
    short, long_ = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(short) == len(long_) or long_[len(long_) - len(short):] != short:
        raise ValueError(f"{op}: incompatible shapes {sa} and {sb} (only leading-batch expansion is supported)")


def _unbatch(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over the leading axes an operand was expanded along."""
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def _binary_args(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    ref = a if isinstance(a, Tensor) else b
    return as_tensor(a, ref), as_tensor(b, ref)


def add(a, b) -> Tensor:
    a, b = _binary_args(a, b)
    _check_batch_shapes(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbatch(g, sa), _unbatch(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _binary_args(a, b)
    _check_batch_shapes(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbatch(g, sa), -_unbatch(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _binary_args(a, b)
    _check_batch_shapes(a.data, b.data, "mul")
    av, bv = a.data, b.data

    def backward(g):
        return (
            _unbatch(g * bv, av.shape) if a.requires_grad else None,
            _unbatch(g * av, bv.shape) if b.requires_grad else None,
        )

    return _make(av * bv, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _binary_args(a, b)
    _check_batch_shapes(a.data, b.data, "div")
    av, bv = a.data, b.data
    out = av / bv

    def backward(g):
        return (
            _unbatch(g / bv, av.shape) if a.requires_grad else None,
            _unbatch(-g * out / bv, bv.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), backward)


def power(a: Tensor, p: float) -> Tensor:
    if isinstance(p, Tensor):
        raise TypeError("power only supports a constant exponent")
    av = a.data
    return _make(av ** p, (a,), lambda g: (g * p * av ** (p - 1),))


# -- linear algebra and shape ops ----------------------------------------------

def matmul(a, b) -> Tensor:
    """``a @ b`` with matching leading axes, or a 2-D right operand shared across the batch."""
    a, b = _binary_args(a, b)
    av, bv = a.data, b.data
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError(f"matmul: operands must be at least 2-D, got {av.shape} and {bv.shape}")
    if av.shape[-1] != bv.shape[-2] or (bv.ndim > 2 and av.shape[:-2] != bv.shape[:-2]):
        raise ValueError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
    shared = bv.ndim == 2

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bv, -1, -2)
        if b.requires_grad:
            if shared:
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    return _make(av @ bv, (a, b), backward)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ValueError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


def slice_(a: Tensor, idx) -> Tensor:
    src_shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(src_shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _make(a.data[idx], (a,), backward)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis, keepdims) * (1.0 / float(n))


# -- unary nonlinearities --------------------------------------------------------

def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    av = a.data
    return _make(np.log(av), (a,), lambda g: (g / av,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    out = np.exp(z)
    out /= out.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), backward)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine part)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat, (a,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * (x * x * x))
    th = np.tanh(u)
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * (x * x))
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du),)

    return _make(out, (a,), backward)


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale the last axis to unit Euclidean length."""
    x = a.data
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True) + eps)
    out = x / n

    def backward(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / n,)

    return _make(out, (a,), backward)


class Function:
    """Escape hatch for fused ops with hand-written gradients.

    Subclasses implement ``forward(*arrays) -> array`` (stashing whatever they
    need on ``self``) and ``backward(grad) -> tuple of arrays`` (one per input,
    ``None`` for inputs without a gradient).
    """

    def forward(self, *arrays):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def __call__(self, *inputs) -> Tensor:
        inputs = [as_tensor(t) for t in inputs]
        out = self.forward(*[t.data for t in inputs])
        return _make(out, inputs, self.backward)
