"""Dense numpy-backed tensor with tape-based reverse-mode differentiation.

Every differentiable op records one node on the active :class:`Tape`. Nodes are
appended in execution order, so the tape is topologically sorted by
construction and :meth:`Tape.backward` is a single reverse sweep.
"""
from __future__ import annotations

import builtins
import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "GradientStore",
    "ShapeError",
    "tensor",
    "zeros",
    "ones",
    "get_default_dtype",
    "set_default_dtype",
    "precision",
    "no_grad",
    "set_debug",
    "current_tape",
    "backward",
    "finite_difference_check",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "relu",
    "gelu",
    "softplus",
    "matmul",
    "sum",
    "mean",
    "reshape",
    "permute",
    "transpose",
    "getitem",
    "concat",
    "split",
    "stack",
    "softmax",
    "log_softmax",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_state = threading.local()
_DEFAULT_DTYPE = [np.dtype(np.float32)]
_DEBUG = [False]


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE[0]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE[0] = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default float precision."""
    old = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def set_debug(flag: bool) -> None:
    """In debug mode every forward op asserts its output is finite."""
    _DEBUG[0] = bool(flag)


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class _Node:
    __slots__ = ("kind", "inputs", "backward")

    def __init__(self, kind, inputs, backward):
        self.kind = kind
        self.inputs = inputs
        self.backward = backward


class GradientStore(dict):
    """Mapping from leaf tensor id to accumulated gradient array."""

    def __init__(self, leaves):
        super().__init__()
        self._leaves = leaves

    def __getitem__(self, t):
        return dict.__getitem__(self, id(t) if isinstance(t, Tensor) else t)

    def get(self, t, default=None):
        return dict.get(self, id(t) if isinstance(t, Tensor) else t, default)

    def leaves(self):
        return list(self._leaves.values())


class Tape:
    """Append-only record of differentiable ops.

    Use as a context manager to make it the active tape for the current
    thread; otherwise ops record onto a per-thread default tape.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def record(self, kind: str, inputs: tuple, backward: Callable) -> int:
        self.nodes.append(_Node(kind, inputs, backward))
        return len(self.nodes) - 1

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def backward(self, loss: "Tensor", accumulate: bool = True) -> GradientStore:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        leaves: dict[int, Tensor] = {}
        store = GradientStore(leaves)
        if loss.node is None:
            if loss.requires_grad:
                g = np.ones_like(loss.data)
                leaves[id(loss)] = loss
                dict.__setitem__(store, id(loss), g)
                if accumulate:
                    loss._accumulate(g)
            return store
        if loss.tape is not self:
            raise ValueError("loss was not recorded on this tape")
        pending: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
        for idx in range(loss.node, -1, -1):
            g = pending.pop(idx, None)
            if g is None:
                continue
            node = self.nodes[idx]
            grads = node.backward(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.node is not None and inp.tape is self:
                    prev = pending.get(inp.node)
                    pending[inp.node] = gi if prev is None else prev + gi
                else:
                    key = id(inp)
                    leaves[key] = inp
                    prev = dict.get(store, key)
                    dict.__setitem__(store, key, gi if prev is None else prev + gi)
        if accumulate:
            for key, t in leaves.items():
                t._accumulate(dict.__getitem__(store, key))
        return store


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = [Tape()]
        _state.tapes = stack
    return stack


def current_tape() -> Tape:
    return _tape_stack()[-1]


def backward(loss: "Tensor", tape: Tape | None = None) -> GradientStore:
    """Run reverse-mode differentiation from scalar ``loss``."""
    tape = tape or loss.tape or current_tape()
    return tape.backward(loss)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "tape", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or get_default_dtype())
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: int | None = None
        self.tape: Tape | None = None
        self.name = name

    # -- basic properties
    @property
    def shape(self) -> tuple:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=self.data.dtype).reshape(self.data.shape)
        self.grad = g.copy() if self.grad is None else self.grad + g

    def backward(self) -> GradientStore:
        return backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- operators
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
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- method forms
    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def transpose(self, a: int = -2, b: int = -1):
        return transpose(self, a, b)

    @property
    def T(self):
        return transpose(self, -2, -1)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def softmax(self, axis=-1):
        return softmax(self, axis)

    def flatten(self, start: int = 0):
        start = start % self.ndim if self.ndim else 0
        return reshape(self, self.shape[:start] + (-1,))


def _raise_item(t):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=get_default_dtype()), requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=get_default_dtype()), requires_grad)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, inputs: Sequence[Tensor], kind: str, bwd: Callable) -> Tensor:
    """Wrap a forward result and record its node when any input needs grad."""
    if _DEBUG[0] and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite output from op {kind!r}")
    out = Tensor.__new__(Tensor)
    out.data = data if data.flags.c_contiguous else np.ascontiguousarray(data)
    out.grad = None
    out.name = None
    out.node = None
    out.tape = None
    needs = _grad_enabled() and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        tape = current_tape()
        out.node = tape.record(kind, tuple(inputs), bwd)
        out.tape = tape
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), "add", lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), "sub", lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data

    def bwd(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, (a, b), "mul", bwd)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bwd(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), "div", bwd)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), "neg", lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    ad = a.data
    return _make(ad**p, (a,), "pow", lambda g: (g * p * ad ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), "log", lambda g: (g / ad,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), "tanh", lambda g: (g * (1 - out * out),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return _make(out, (a,), "sigmoid", lambda g: (g * out * (1 - out),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed stably."""
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), "softplus", lambda g: (g * _sigmoid_np(x),))


def relu(a: Tensor) -> Tensor:
    x = a.data
    mask = x > 0
    return _make(np.where(mask, x, 0).astype(x.dtype), (a,), "relu", lambda g: (g * mask,))


_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x) with Phi the standard normal CDF."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return _make((x * cdf).astype(x.dtype), (a,), "gelu", lambda g: (g * (cdf + x * pdf),))


_UNARY = {
    "neg": neg,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "relu": relu,
    "gelu": gelu,
    "softmax": lambda a: softmax(a, -1),
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name (``add``, ``mul``, ``relu``, ...)."""
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](_as_tensor(a))
    raise ValueError(f"unknown elementwise op {kind!r}")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), "matmul", bwd)


# ---------------------------------------------------------------- reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), "sum", bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    shape = a.shape

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape),)

    return _make(np.asarray(a.data.mean(axis=axes, keepdims=keepdims)), (a,), "mean", bwd)


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None
    src = a.shape
    return _make(out, (a,), "reshape", lambda g: (g.reshape(src),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(ax) for ax in axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)) or len(axes) != a.ndim:
        raise ShapeError(f"invalid permutation {axes} for rank {a.ndim}")
    inv = tuple(np.argsort([ax % a.ndim for ax in axes]))
    return _make(np.transpose(a.data, axes), (a,), "permute", lambda g: (np.transpose(g, inv),))


def transpose(a: Tensor, ax0: int = -2, ax1: int = -1) -> Tensor:
    axes = list(range(a.ndim))
    axes[ax0], axes[ax1] = axes[ax1], axes[ax0]
    return permute(a, axes)


def _check_index(shape, idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    if any(it is Ellipsis or it is None or isinstance(it, (np.ndarray, list)) for it in items):
        return
    if len(items) > len(shape):
        raise IndexError(f"too many indices for shape {shape}")
    for it, n in zip(items, shape):
        if isinstance(it, slice):
            for v in (it.start, it.stop):
                if v is not None and (v > n or v < -n):
                    raise IndexError(f"slice bound {v} out of range for axis of size {n}")
        elif isinstance(it, (int, np.integer)) and not -n <= it < n:
            raise IndexError(f"index {it} out of range for axis of size {n}")


def getitem(a: Tensor, idx) -> Tensor:
    """Basic or advanced indexing. Advanced indices scatter-add on backward."""
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.int64)
    _check_index(a.shape, idx)
    out = a.data[idx]
    shape, dtype = a.shape, a.data.dtype

    items = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(it, (slice, int, np.integer)) or it is None or it is Ellipsis for it in items)

    def bwd(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out, dtype=dtype), (a,), "getitem", bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    ax = axis % tensors[0].ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[d] != ref[d] for d in range(len(ref)) if d != ax):
            raise ShapeError(f"concat shape mismatch: {ref} vs {t.shape} on axis {ax}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bwd(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, "concat", bwd)


def split(a: Tensor, sections, axis: int = 0) -> list[Tensor]:
    """Split into ``sections`` equal parts (int) or parts of the listed sizes."""
    ax = axis % a.ndim
    n = a.shape[ax]
    if isinstance(sections, int):
        if sections <= 0 or n % sections:
            raise ShapeError(f"axis of size {n} not divisible into {sections} groups")
        sizes = [n // sections] * sections
    else:
        sizes = list(sections)
        if builtins.sum(sizes) != n:
            raise ShapeError(f"split sizes {sizes} do not sum to {n}")
    out, start = [], 0
    for s in sizes:
        sl = [slice(None)] * a.ndim
        sl[ax] = slice(start, start + s)
        out.append(getitem(a, tuple(sl)))
        start += s
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ax = axis % (tensors[0].ndim + 1)
    expanded = [reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in tensors]
    return concat(expanded, axis=ax)


# ---------------------------------------------------------------- softmax family


def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; ``mask`` is an additive array (``-inf`` = excluded)."""
    x = a.data if mask is None else a.data + mask
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out.astype(a.data.dtype), (a,), "softmax", bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    out = x - lse
    sm = np.exp(out)

    def bwd(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), "log_softmax", bwd)


# ---------------------------------------------------------------- verification


def finite_difference_check(
    f: Callable[..., Tensor],
    inputs: Tensor | Iterable[Tensor],
    eps: float | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps the input tensors to a scalar tensor. Relative error per
    component is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    if eps is None:
        eps = 1e-6 if get_default_dtype() == np.float64 else 1e-3
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = f(*inputs)
        grads = tape.backward(out, accumulate=False)
    worst = 0.0
    for t in inputs:
        analytic = grads.get(t)
        analytic = np.zeros_like(t.data) if analytic is None else np.asarray(analytic, dtype=np.float64)
        flat = t.data.reshape(-1)
        a_flat = analytic.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f(*inputs).data.sum(dtype=np.float64))
                flat[i] = orig - eps
                fm = float(f(*inputs).data.sum(dtype=np.float64))
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                an = float(a_flat[i])
                err = abs(an - num) / max(abs(an), abs(num), 1e-8)
                worst = max(worst, err)
    return worst
