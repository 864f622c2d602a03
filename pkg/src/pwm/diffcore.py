"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every op returns a :class:`Tensor`. When any input requires a gradient (and
recording is enabled), the result keeps references to its inputs plus a
closure mapping the output cotangent to input cotangents. Nodes carry a
monotonically increasing sequence number, so sorting the nodes reachable from
a root by that number yields the tape in recording order; :func:`backward`
replays it in reverse.

Broadcasting is limited to the leading batch dimensions: two operands must
have equal shapes, one must hold a single element, or the shorter shape must
be a suffix of the longer one.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "tensor",
    "zeros",
    "ones",
    "backward",
    "no_grad",
    "enable_grad",
    "is_grad_enabled",
    "debug_checks",
    "precision",
    "get_default_dtype",
    "set_default_dtype",
    "forward_op",
    "OPS",
    "stop_gradient",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "matmul",
    "linear",
    "ensemble_linear",
    "sum",
    "mean",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "relu",
    "softplus",
    "mish",
    "sin",
    "cos",
    "square",
    "sqrt",
    "abs",
    "softmax",
    "log_softmax",
    "layer_norm",
    "mse",
    "cross_entropy_with_logits",
    "concat",
    "stack",
    "reshape",
    "getitem",
    "clamp",
    "maximum",
]


class ShapeError(ValueError):
    """Operand shapes do not conform to an op's broadcasting rules."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(FloatingPointError):
    """Raised by debug checks when an op produces NaN or inf."""

    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op}: non-finite values in output")


# ---------------------------------------------------------------------------
# global (per-thread) recording state

class _State(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.debug = False
        self.dtype = np.dtype(np.float32)


_state = _State()
_seq = itertools.count()


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def enable_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = True
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def debug_checks(enabled: bool = True):
    """Raise :class:`NonFiniteError` as soon as any op emits NaN/inf."""
    prev = _state.debug
    _state.debug = enabled
    try:
        yield
    finally:
        _state.debug = prev


def get_default_dtype() -> np.dtype:
    return _state.dtype


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _state.dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    prev = _state.dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


# ---------------------------------------------------------------------------
# Tensor

class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_seq", "_consumed",
                 "__weakref__")

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        dt = np.dtype(dtype) if dtype is not None else _state.dtype
        self.data = np.asarray(data, dtype=dt)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self._op = "leaf"
        self._seq = next(_seq)
        self._consumed = False

    # -- introspection -------------------------------------------------------
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

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{flag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)

    # -- operators -------------------------------------------------------------
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

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad, dtype=dtype)


def ones(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dt = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dt)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if _state.debug and not np.all(np.isfinite(data)):
        raise NonFiniteError(op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._seq = next(_seq)
    out._consumed = False
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _broadcast_check(op: str, a: tuple, b: tuple) -> None:
    if a == b:
        return
    if int(np.prod(a)) == 1 or int(np.prod(b)) == 1:
        return
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if long_[len(long_) - len(short):] == short:
        return
    raise ShapeError(op, a, b, detail="only leading-batch broadcasting is supported")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return np.asarray(g.sum()).reshape(shape)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# ---------------------------------------------------------------------------
# Tape / backward

class Tape:
    """Nodes reachable from a root, in recording order.

    Built by :func:`backward`; iterating a tape in reverse visits every node
    after all of its consumers.
    """

    def __init__(self, root: Tensor):
        nodes = []
        seen = set()
        stack = [root]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node._consumed:
                raise RuntimeError(
                    "graph already consumed by a previous backward pass; use retain_graph=True")
            nodes.append(node)
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append(p)
        nodes.sort(key=lambda n: n._seq)
        self.nodes = nodes

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def reset(self) -> None:
        """Release saved buffers so the graph can be garbage collected."""
        for node in self.nodes:
            if node._parents:
                node._parents = ()
                node._backward = None
                node._consumed = True
        self.nodes = []


def backward(root: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Gradients accumulate across calls; clear them with ``zero_grad``. Unless
    ``retain_graph`` is set the graph is released afterwards and cannot be
    replayed.
    """
    if root.size != 1:
        raise ShapeError("backward", root.shape, detail="root must be a scalar")
    if not root.requires_grad:
        return
    tape = Tape(root)
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            if node.grad is None:
                node.grad = np.array(g, dtype=node.data.dtype, copy=True).reshape(node.shape)
            else:
                node.grad += g
            continue
        pgs = node._backward(g)
        for p, pg in zip(node._parents, pgs):
            if pg is None or not p.requires_grad:
                continue
            pg = _unbroadcast(pg, p.shape)
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if not retain_graph:
        tape.reset()


# ---------------------------------------------------------------------------
# elementwise binary

def _binary(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        a = Tensor(a)
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary(a, b)
    _broadcast_check("add", a.shape, b.shape)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)
    _broadcast_check("sub", a.shape, b.shape)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)
    _broadcast_check("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b) -> Tensor:
    a, b = _binary(a, b)
    _broadcast_check("div", a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = g / bd
        return ga, -ga * out

    return _make(out, (a, b), bw, "div")


def maximum(a, b) -> Tensor:
    a, b = _binary(a, b)
    _broadcast_check("maximum", a.shape, b.shape)
    ad, bd = a.data, b.data
    pick_a = ad >= bd
    return _make(np.maximum(ad, bd), (a, b), lambda g: (g * pick_a, g * ~pick_a), "maximum")


def neg(x) -> Tensor:
    x = _as_tensor(x)
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def power(x, p: float) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    return _make(xd ** p, (x,), lambda g: (g * p * xd ** (p - 1),), "power")


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b) -> Tensor:
    """``a[..., k] @ b[k, n]``; ``a`` may carry any number of leading batch dims."""
    a, b = _binary(a, b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if ad.ndim == 1:
                gb = np.outer(ad, g)
            else:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(ad @ bd, (a, b), bw, "matmul")


def linear(x, w, b=None) -> Tensor:
    """Fused ``x @ w + b``."""
    x = _as_tensor(x)
    w = _as_tensor(w, x)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError("linear", x.shape, w.shape)
    if b is not None:
        b = _as_tensor(b, x)
        if b.shape != (w.shape[1],):
            raise ShapeError("linear", x.shape, w.shape, b.shape)
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out = out + b.data

    def bw(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = gb = None
        if w.requires_grad:
            gw = xd.reshape(-1, xd.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        if b is not None and b.requires_grad:
            gb = g.reshape(-1, g.shape[-1]).sum(0)
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, bw, "linear")


def ensemble_linear(x, w, b=None, shared: bool = False) -> Tensor:
    """K independent affine maps evaluated together.

    ``w`` is (K, i, o) and ``b`` (K, o). ``x`` is per-member, (..., K, i), or
    with ``shared=True`` one input (..., i) fed to every member; the result is
    (..., K, o).
    """
    x = _as_tensor(x)
    w = _as_tensor(w, x)
    if w.ndim != 3:
        raise ShapeError("ensemble_linear", x.shape, w.shape)
    K, i, o = w.shape
    if x.shape[-1] != i or (not shared and (x.ndim < 2 or x.shape[-2] != K)):
        raise ShapeError("ensemble_linear", x.shape, w.shape)
    if b is not None:
        b = _as_tensor(b, x)
        if b.shape != (K, o):
            raise ShapeError("ensemble_linear", x.shape, w.shape, b.shape)
    wd = w.data
    lead = x.shape[:-1] if shared else x.shape[:-2]
    n = int(np.prod(lead)) if lead else 1
    if shared:
        x2 = x.data.reshape(n, i)
        out = np.matmul(x2, wd)  # (K, n, o)
    else:
        x2 = x.data.reshape(n, K, i).transpose(1, 0, 2)
        out = np.matmul(x2, wd)
    if b is not None:
        out = out + b.data[:, None, :]
    result = out.transpose(1, 0, 2).reshape(*lead, K, o)

    def bw(g):
        gk = g.reshape(n, K, o).transpose(1, 0, 2)  # (K, n, o)
        gx = gw = gb = None
        if x.requires_grad:
            gxk = np.matmul(gk, wd.transpose(0, 2, 1))  # (K, n, i)
            gx = gxk.sum(0).reshape(x.shape) if shared else gxk.transpose(1, 0, 2).reshape(x.shape)
        if w.requires_grad:
            gw = np.matmul(x2.T[None] if shared else x2.transpose(0, 2, 1), gk)
        if b is not None and b.requires_grad:
            gb = gk.sum(1)
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(result, parents, bw, "ensemble_linear")


# ---------------------------------------------------------------------------
# reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        for ax in sorted(axis):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    ax = _norm_axis(axis, x.ndim)
    shape = x.shape
    return _make(np.sum(x.data, axis=ax, keepdims=keepdims), (x,),
                 lambda g: (_expand_reduced(g, shape, ax, keepdims),), "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    ax = _norm_axis(axis, x.ndim)
    shape = x.shape
    n = x.size if ax is None else int(np.prod([shape[a] for a in ax]))
    return _make(np.mean(x.data, axis=ax, keepdims=keepdims), (x,),
                 lambda g: (_expand_reduced(g / n, shape, ax, keepdims),), "mean")


# ---------------------------------------------------------------------------
# elementwise unary

def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1 - out * out),), "tanh")


def _sigmoid(x):
    return np.exp(-np.logaddexp(0, -x))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    out = _sigmoid(x.data)
    return _make(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def softplus(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    return _make(np.logaddexp(0, xd), (x,), lambda g: (g * _sigmoid(xd),), "softplus")


def mish(x) -> Tensor:
    """``x * tanh(softplus(x))``, evaluated with a single exponential."""
    x = _as_tensor(x)
    xd = x.data
    e = np.exp(np.minimum(xd, 20.0))
    n = e * (e + 2)
    t = n / (n + 2)
    out = xd * t

    def bw(g):
        return (g * (t + xd * (1 - t * t) * (e / (1 + e))),)

    return _make(out, (x,), bw, "mish")


def sin(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    return _make(np.sin(xd), (x,), lambda g: (g * np.cos(xd),), "sin")


def cos(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    return _make(np.cos(xd), (x,), lambda g: (-g * np.sin(xd),), "cos")


def square(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2 * g * xd,), "square")


def sqrt(x) -> Tensor:
    x = _as_tensor(x)
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g / (2 * out),), "sqrt")


def abs(x) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    s = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * s,), "abs")


def clamp(x, lo: float, hi: float) -> Tensor:
    """Elementwise clip. The gradient is 1 on the closed interval [lo, hi]."""
    if lo > hi:
        raise ValueError(f"clamp: lo={lo} > hi={hi}")
    x = _as_tensor(x)
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return _make(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,), "clamp")


def stop_gradient(x) -> Tensor:
    """Forward identity that contributes nothing to the backward pass."""
    x = _as_tensor(x)
    return Tensor(x.data, dtype=x.data.dtype)


# ---------------------------------------------------------------------------
# last-axis normalisers

def _softmax_np(xd):
    z = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax_np(xd):
    z = xd - xd.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(x) -> Tensor:
    x = _as_tensor(x)
    s = _softmax_np(x.data)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (x,), bw, "softmax")


def log_softmax(x) -> Tensor:
    x = _as_tensor(x)
    out = _log_softmax_np(x.data)

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def layer_norm(x, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply optional elementwise gain and bias."""
    x = _as_tensor(x)
    n = x.shape[-1]
    for p in (gain, bias):
        if p is not None and tuple(p.shape) != (n,):
            raise ShapeError("layer_norm", x.shape, p.shape)
    xd = x.data
    k = 1.0 / n
    xc = xd - np.add.reduce(xd, axis=-1, keepdims=True) * k
    inv = 1.0 / np.sqrt(np.add.reduce(xc * xc, axis=-1, keepdims=True) * k + eps)
    xhat = xc * inv
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data

    def bw(g):
        dxhat = g * gain.data if gain is not None else g
        gx = None
        if x.requires_grad:
            gx = inv * (dxhat - np.add.reduce(dxhat, axis=-1, keepdims=True) * k
                        - xhat * (np.add.reduce(dxhat * xhat, axis=-1, keepdims=True) * k))
        res = [gx]
        if gain is not None:
            res.append((g * xhat).reshape(-1, n).sum(0) if gain.requires_grad else None)
        if bias is not None:
            res.append(g.reshape(-1, n).sum(0) if bias.requires_grad else None)
        return tuple(res)

    parents = [x] + [p for p in (gain, bias) if p is not None]
    return _make(out, parents, bw, "layer_norm")


# ---------------------------------------------------------------------------
# losses

def mse(a, b) -> Tensor:
    """Mean squared error over all elements (scalar)."""
    a, b = _binary(a, b)
    if a.shape != b.shape:
        raise ShapeError("mse", a.shape, b.shape)
    diff = a.data - b.data
    n = diff.size

    def bw(g):
        ga = g * 2.0 * diff / n
        return ga, -ga

    return _make(np.asarray(np.mean(diff * diff)), (a, b), bw, "mse")


def cross_entropy_with_logits(logits, target) -> Tensor:
    """Per-row ``-sum(target * log_softmax(logits))`` over the last axis."""
    logits = _as_tensor(logits)
    target = _as_tensor(target, logits)
    if logits.shape != target.shape:
        raise ShapeError("cross_entropy_with_logits", logits.shape, target.shape)
    ls = _log_softmax_np(logits.data)
    td = target.data
    out = -(td * ls).sum(axis=-1)

    def bw(g):
        g = g[..., None]
        gl = g * (np.exp(ls) * td.sum(axis=-1, keepdims=True) - td) if logits.requires_grad else None
        gt = -g * ls if target.requires_grad else None
        return gl, gt

    return _make(out, (logits, target), bw, "cross_entropy_with_logits")


# ---------------------------------------------------------------------------
# structural

def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat", detail="no inputs")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ShapeError("concat", *[t.shape for t in ts])
    sizes = [t.shape[ax] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts or any(t.shape != ts[0].shape for t in ts):
        raise ShapeError("stack", *[t.shape for t in ts])
    ax = axis % (ts[0].ndim + 1)

    def bw(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(ts)))

    return _make(np.stack([t.data for t in ts], axis=ax), ts, bw, "stack")


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    orig = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError("reshape", orig, tuple(shape)) from exc
    return _make(out, (x,), lambda g: (g.reshape(orig),), "reshape")


def _is_fancy(idx) -> bool:
    if isinstance(idx, tuple):
        return any(_is_fancy(i) for i in idx)
    return isinstance(idx, (list, np.ndarray, Tensor))


def getitem(x, idx) -> Tensor:
    """Basic or integer-array indexing (the ``slice`` op)."""
    x = _as_tensor(x)
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.intp)
    shape, dt = x.shape, x.data.dtype
    fancy = _is_fancy(idx)

    def bw(g):
        out = np.zeros(shape, dtype=dt)
        if fancy:
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)

    return _make(np.asarray(x.data[idx]), (x,), bw, "slice")


# ---------------------------------------------------------------------------
# dispatch by name

OPS: dict[str, Callable] = {
    "matmul": matmul,
    "linear": linear,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "maximum": maximum,
    "neg": neg,
    "power": power,
    "sum": sum,
    "mean": mean,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "softplus": softplus,
    "mish": mish,
    "sin": sin,
    "cos": cos,
    "square": square,
    "sqrt": sqrt,
    "abs": abs,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "layer_norm": layer_norm,
    "mse": mse,
    "cross_entropy_with_logits": cross_entropy_with_logits,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "stack": lambda *ts, axis=0: stack(ts, axis=axis),
    "reshape": reshape,
    "ensemble_linear": ensemble_linear,
    "slice": getitem,
    "clamp": clamp,
    "stop_gradient": stop_gradient,
}


def forward_op(kind: str, inputs: Iterable, **attrs) -> Tensor:
    """Apply the op registered under ``kind`` to ``inputs``."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **attrs)
