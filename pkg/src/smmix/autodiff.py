"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the operations a plain vision transformer and the mixing losses need are
provided. Every op computes its forward value eagerly and, when any input
requires a gradient, records a :class:`Node` holding a closure that maps the
output gradient to input gradients.

Broadcasting is deliberately narrow: an operand may be a scalar, or its shape
may equal a trailing suffix of the other operand's shape (bias vectors,
positional embeddings). Anything else is a :class:`ShapeError`.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_FLOOR = 1e-12
DIST_TOL = 1e-6

_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_K = 0.044715

_node_ids = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class DistributionError(ValueError):
    """A row that must be a probability distribution is not one."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up in a value or gradient."""


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (thread-local)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    id: int = field(default_factory=lambda: next(_node_ids))


class Tensor:
    """Dense array with an optional gradient slot.

    ``data`` is always a numpy array of float32 or float64. Leaves created by
    the user carry ``requires_grad``; results of ops carry a ``node`` when they
    were recorded.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -----------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _needs_grad(*ts: Tensor) -> bool:
    return grad_enabled() and any(t.requires_grad or t.node is not None for t in ts)


def _make(data: np.ndarray, op: str, inputs: tuple[Tensor, ...], bw) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _needs_grad(*inputs):
        out.node = Node(op, inputs, bw)
    return out


def _tracks(t: Tensor) -> bool:
    return t.requires_grad or t.node is not None


# -- broadcasting ------------------------------------------------------

def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 and a.ndim <= len(sb) or b.size == 1 and b.ndim <= len(sa):
        return
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return
    raise ShapeError(f"{op}: cannot broadcast shapes {sa} and {sb}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if int(np.prod(shape)) == 1:
        return grad.sum().reshape(shape)
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead))).reshape(shape)


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    return a, b


# -- elementwise -------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast("add", a.data, b.data)
    sa, sb = a.shape, b.shape

    def bw(g):
        return (_unbroadcast(g, sa) if _tracks(a) else None,
                _unbroadcast(g, sb) if _tracks(b) else None)

    return _make(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast("sub", a.data, b.data)
    sa, sb = a.shape, b.shape

    def bw(g):
        return (_unbroadcast(g, sa) if _tracks(a) else None,
                _unbroadcast(-g, sb) if _tracks(b) else None)

    return _make(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast("mul", a.data, b.data)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if _tracks(a) else None,
                _unbroadcast(g * ad, bd.shape) if _tracks(b) else None)

    return _make(ad * bd, "mul", (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with optional shared leading (batch) dimensions.

    ``b`` may be 2-D while ``a`` is batched (weight application); otherwise
    both must carry identical leading dimensions.
    """
    a, b = _coerce_pair(a, b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")
    if bd.ndim != 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ for {ad.shape} and {bd.shape}")

    def bw(g):
        ga = gb = None
        if _tracks(a):
            ga = g @ np.swapaxes(bd, -1, -2)
        if _tracks(b):
            if bd.ndim == 2 and ad.ndim > 2:
                k, n = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, "matmul", (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for (..., k) inputs and a (k, n) weight."""
    xd, wd = x.data, weight.data
    if wd.ndim != 2 or xd.shape[-1] != wd.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {xd.shape} and {wd.shape}")
    k, n = wd.shape
    out = xd.reshape(-1, k) @ wd
    if bias is not None:
        if bias.shape != (n,):
            raise ShapeError(f"linear: bias shape {bias.shape}, expected {(n,)}")
        out += bias.data
    out = out.reshape(*xd.shape[:-1], n)

    def bw(g):
        g2 = g.reshape(-1, n)
        gx = (g2 @ wd.T).reshape(xd.shape) if _tracks(x) else None
        gw = xd.reshape(-1, k).T @ g2 if _tracks(weight) else None
        gb = g2.sum(axis=0) if bias is not None and _tracks(bias) else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, "linear", inputs, bw)


# -- shape ops ---------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inv),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    src_shape, dtype = a.shape, a.dtype

    basic = _is_basic_index(idx)

    def bw(g):
        out = np.zeros(src_shape, dtype=dtype)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(np.ascontiguousarray(a.data[idx]), "getitem", (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), "concat", tensors, bw)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), "sum", (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([src[ax] for ax in axes]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, src).copy(),)

    return _make(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), "mean", (a,), bw)


# -- nonlinearities ----------------------------------------------------

def _softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis (max-subtracted)."""
    y = _softmax_np(x.data)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, "softmax", (x,), bw)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, "log_softmax", (x,), bw)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    # the in-place passes below need real arrays, so lift 0-d input to 1-d
    xd = x.data.reshape(-1) if x.data.ndim == 0 else x.data
    x2 = xd * xd
    t = x2 * _GELU_K
    t += 1.0
    t *= xd
    t *= _GELU_C
    np.tanh(t, out=t)
    out = t + 1.0
    out *= xd
    out *= 0.5

    def bw(g):
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3k x^2)
        du = x2 * (3.0 * _GELU_K)
        du += 1.0
        du *= _GELU_C
        du *= xd
        sech2 = t * t
        np.subtract(1.0, sech2, out=sech2)
        du *= sech2
        du += t
        du += 1.0
        du *= 0.5
        du *= g.reshape(du.shape)
        return (du.reshape(x.shape),)

    return _make(out.reshape(x.shape), "gelu", (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    xd = x.data
    d = xd.shape[-1]
    xhat = xd - xd.mean(axis=-1, keepdims=True)
    inv = np.einsum("...i,...i->...", xhat, xhat)[..., None]
    inv /= d
    inv += eps
    np.sqrt(inv, out=inv)
    np.divide(1.0, inv, out=inv)
    xhat *= inv
    out = xhat * gamma.data
    out += beta.data

    def bw(g):
        gx = gg = gb = None
        g2 = g.reshape(-1, d)
        if _tracks(x):
            gh = g * gamma.data
            proj = np.einsum("...i,...i->...", gh, xhat)[..., None]
            proj /= d
            gx = gh - gh.mean(axis=-1, keepdims=True)
            gx -= xhat * proj
            gx *= inv
        if _tracks(gamma):
            gg = np.einsum("ni,ni->i", g2, xhat.reshape(-1, d))
        if _tracks(beta):
            gb = g2.sum(axis=0)
        return gx, gg, gb

    return _make(out, "layer_norm", (x, gamma, beta), bw)


# -- losses ------------------------------------------------------------

def check_distribution(p: np.ndarray, what: str = "distribution", tol: float = DIST_TOL) -> None:
    p = np.asarray(p)
    if p.ndim != 2:
        raise ShapeError(f"{what}: expected a 2-D batch of rows, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise DistributionError(f"{what}: entries must be finite and non-negative")
    err = np.abs(p.sum(axis=1) - 1.0)
    if np.any(err > tol):
        row = int(np.argmax(err))
        raise DistributionError(f"{what}: row {row} sums to {p[row].sum():.9g}, not 1")


def cross_entropy_soft(logits: Tensor, target) -> Tensor:
    """Batch mean of -sum_c target_c log(max(softmax(logits)_c, 1e-12))."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"cross_entropy_soft: logits {logits.shape} vs target {t.shape}")
    check_distribution(t, "cross_entropy_soft target")
    s = _softmax_np(logits.data)
    live = ~(s <= LOG_FLOOR)  # NaN stays live so it propagates
    logs = np.log(np.where(live, s, LOG_FLOOR))
    n = logits.shape[0]
    value = -(t * logs).sum() / n

    def bw(g):
        st = np.where(live, -t, 0.0)  # s * dL/ds
        return ((st - s * st.sum(axis=-1, keepdims=True)) * (g / n),)

    return _make(np.asarray(value, dtype=logits.dtype), "cross_entropy_soft", (logits,), bw)


def kl_divergence(p, q) -> Tensor:
    """Batch mean of D_KL(p || q) = sum p log(p / q).

    Zero entries of ``p`` contribute nothing; both logs are floored at 1e-12.
    Either argument may carry a gradient.
    """
    p, q = _coerce_pair(p, q)
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ShapeError(f"kl_divergence: shapes {p.shape} and {q.shape} differ")
    check_distribution(p.data, "kl_divergence p")
    check_distribution(q.data, "kl_divergence q")
    pd, qd = p.data, q.data
    p_live = ~(pd <= LOG_FLOOR)
    q_live = ~(qd <= LOG_FLOOR)
    log_p = np.log(np.where(p_live, pd, LOG_FLOOR))
    log_q = np.log(np.where(q_live, qd, LOG_FLOOR))
    n = pd.shape[0]
    value = (pd * (log_p - log_q)).sum() / n

    def bw(g):
        gp = gq = None
        if _tracks(p):
            gp = (log_p - log_q + p_live) * (g / n)
        if _tracks(q):
            gq = np.where(q_live, -pd / np.where(q_live, qd, 1.0), 0.0) * (g / n)
        return gp, gq

    return _make(np.asarray(value, dtype=pd.dtype), "kl_divergence", (p, q), bw)


def _all_finite(a: np.ndarray) -> bool:
    # one reduction instead of an elementwise mask; confirm on the slow path
    if np.isfinite(a.sum()):
        return True
    return bool(np.all(np.isfinite(a)))


def check_finite(t: Tensor, where: str = "tensor") -> Tensor:
    if not _all_finite(t.data):
        raise NonFiniteError(f"non-finite values in {where} (shape {t.shape})")
    return t


# -- graph -------------------------------------------------------------

class ComputationGraph:
    """Nodes reachable from a loss, in insertion (creation) order."""

    def __init__(self, loss: Tensor):
        self.loss = loss
        seen: dict[int, Node] = {}
        stack = [loss.node] if loss.node is not None else []
        while stack:
            node = stack.pop()
            if node.id in seen:
                continue
            seen[node.id] = node
            stack.extend(t.node for t in node.inputs if t.node is not None)
        self.nodes: list[Node] = [seen[k] for k in sorted(seen)]

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self) -> None:
        loss = self.loss
        if loss.size != 1:
            raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
        if loss.node is None:
            if loss.requires_grad:
                _accumulate(loss, np.ones_like(loss.data))
            return
        grads: dict[int, np.ndarray] = {loss.node.id: np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not _tracks(t):
                    continue
                if not _all_finite(gi):
                    raise NonFiniteError(
                        f"non-finite gradient produced by node #{node.id} ({node.op})")
                if t.node is not None:
                    prev = grads.get(t.node.id)
                    grads[t.node.id] = gi if prev is None else prev + gi
                if t.requires_grad:
                    _accumulate(t, gi)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf (accumulating)."""
    ComputationGraph(loss).backward()


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
