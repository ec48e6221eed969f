"""Dense float64 tensors with define-by-run reverse-mode autodiff.

Every operation builds a node holding its parents and a closure mapping the
upstream gradient to one gradient per parent. ``backward`` orders the graph
reachable from a scalar loss topologically and runs the closures in reverse.

Broadcasting is restricted to leading batch dimensions: two operands must
have identical shapes, or the shape of one must be a suffix of the other
(``[B, T, d] + [d]``). Anything else raises :class:`DimensionError`.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import DimensionError, GraphError

_local = threading.local()

_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    """A float64 array with an optional gradient slot.

    ``grad`` is ``None`` until a backward pass reaches the tensor; leaf tensors
    accumulate into it across backward calls until :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self._consumed = False

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out._consumed = False
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

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


def constant(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# graph traversal


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Populate ``grad`` on every requires-grad leaf reachable from ``loss``.

    Gradients accumulate additively on leaves. Unless ``retain_graph`` is set
    the graph is released afterwards and a second call on the same loss
    raises :class:`GraphError`.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward already ran on this graph; rebuild it or pass retain_graph=True")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor with requires_grad=True")

    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

    if not retain_graph:
        loss._consumed = True
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node.requires_grad = False


# ---------------------------------------------------------------------------
# elementwise


def _broadcast_pair(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    short, long_ = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(short) == len(long_) or long_[len(long_) - len(short):] != short:
        raise DimensionError(f"{op}: incompatible shapes {sa} and {sb} (only leading-batch broadcast allowed)")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_pair(a, b, "add")
    sa, sb = a.shape, b.shape
    ra, rb = a.requires_grad, b.requires_grad
    return Tensor._from_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa) if ra else None, _unbroadcast(g, sb) if rb else None),
        "add",
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_pair(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub"
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_pair(a, b, "mul")
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape
    ra, rb = a.requires_grad, b.requires_grad
    return Tensor._from_op(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, sa) if ra else None, _unbroadcast(g * ad, sb) if rb else None),
        "mul",
    )


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._from_op(x.data * c, (x,), lambda g: (g * c,), "scale")


def mul_rowwise(x: Tensor, w: Tensor) -> Tensor:
    """Scale each last-axis row of ``x`` [..., d] by the matching entry of ``w`` [...]."""
    if x.shape[:-1] != w.shape:
        raise DimensionError(f"mul_rowwise: weights {w.shape} do not match rows of {x.shape}")
    xd, wd = x.data, w.data
    rw = w.requires_grad
    return Tensor._from_op(
        xd * wd[..., None], (x, w), lambda g: (g * wd[..., None], (g * xd).sum(-1) if rw else None), "mul_rowwise"
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT_2))

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return Tensor._from_op(xd * cdf, (x,), bw, "gelu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor._from_op(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select ``a`` where ``mask`` is true, else ``b``.

    ``mask`` is a constant bool array of ``a``'s shape; ``b`` may be a
    leading-batch broadcast of ``a``.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise DimensionError(f"where: mask {mask.shape} does not match {a.shape}")
    _broadcast_pair(a, b, "where")
    sb = b.shape
    zero = np.zeros((), dtype=np.float64)
    return Tensor._from_op(
        np.where(mask, a.data, b.data),
        (a, b),
        lambda g: (np.where(mask, g, zero), _unbroadcast(np.where(mask, zero, g), sb)),
        "where",
    )


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a`` [..., n, k] times ``b`` [k, m] or ``b`` [..., k, m] with identical leading dims."""
    sa, sb = a.shape, b.shape
    if a.ndim < 2 or b.ndim < 2 or sa[-1] != sb[-2]:
        raise DimensionError(f"matmul: cannot multiply {sa} by {sb}")
    ad, bd = a.data, b.data
    ra, rb = a.requires_grad, b.requires_grad
    if b.ndim == 2:
        k, m = sb

        def bw(g):
            ga = g @ bd.T if ra else None
            gb = ad.reshape(-1, k).T @ g.reshape(-1, m) if rb else None
            return ga, gb

    elif sa[:-2] == sb[:-2]:

        def bw(g):
            return (g @ np.swapaxes(bd, -1, -2) if ra else None, np.swapaxes(ad, -1, -2) @ g if rb else None)

    else:
        raise DimensionError(f"matmul: batch dims of {sa} and {sb} differ")
    return Tensor._from_op(ad @ bd, (a, b), bw, "matmul")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % x.ndim
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    src = x.shape

    def bw(g):
        full = np.zeros(src)
        full[idx] = g
        return (full,)

    return Tensor._from_op(x.data[idx], (x,), bw, "slice")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or t.shape[:axis] + t.shape[axis + 1:] != ref.shape[:axis] + ref.shape[axis + 1:]:
            raise DimensionError(f"concat: {t.shape} does not match {ref.shape} off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return Tensor._from_op(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
        "concat",
    )


def concat_last_axis(*tensors: Tensor) -> Tensor:
    return concat(tensors, axis=-1)


def repeat_axis(x: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis at ``axis`` and repeat ``x`` ``n`` times along it."""
    expanded = np.repeat(np.expand_dims(x.data, axis), n, axis=axis)
    return Tensor._from_op(expanded, (x,), lambda g: (g.sum(axis=axis),), "repeat")


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    src = x.shape
    if axis is None:
        return Tensor._from_op(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, src).copy(),), "sum")
    axis = axis % x.ndim
    return Tensor._from_op(
        x.data.sum(axis=axis), (x,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), src).copy(),), "sum"
    )


def mean_pool(x: Tensor, axis: int) -> Tensor:
    axis = axis % x.ndim
    n = x.shape[axis]
    src = x.shape
    return Tensor._from_op(
        x.data.mean(axis=axis),
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g / n, axis), src).copy(),),
        "mean",
    )


# ---------------------------------------------------------------------------
# normalization and losses


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    return Tensor._from_op(s, (x,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),), "softmax")


def normalize_last(x: Tensor) -> Tensor:
    """Divide each last-axis slice by its sum (slices must have nonzero sum)."""
    s = x.data.sum(axis=-1, keepdims=True)
    y = x.data / s
    return Tensor._from_op(y, (x,), lambda g: ((g - (g * y).sum(axis=-1, keepdims=True)) / s,), "normalize")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs last dim of {x.shape}")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data
    sx = x.shape
    rx, rgb = x.requires_grad, gamma.requires_grad or beta.requires_grad

    def bw(g):
        dx = None
        if rx:
            dxhat = g * gd
            dx = inv * (
                dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if not rgb:
            return dx, None, None
        lead = tuple(range(len(sx) - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._from_op(xhat * gd + beta.data, (x, gamma, beta), bw, "layer_norm")


def cross_entropy(logits: Tensor, labels: Iterable[int]) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range for {c} classes")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return Tensor._from_op(np.asarray(loss), (logits,), bw, "cross_entropy")


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    return Tensor._from_op(
        np.asarray((diff * diff).mean()), (pred, target), lambda g: (g * 2.0 * diff / n, -g * 2.0 * diff / n), "mse"
    )


# ---------------------------------------------------------------------------
# finite-difference checking


def numerical_grad(f: Callable[[], Tensor], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central-difference estimate of d f() / d x, perturbing ``x.data`` in place."""
    out = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    grad_flat = out.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            grad_flat[i] = (fp - fm) / (2.0 * eps)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Norm-wise relative error; both sides below ``floor`` count as agreement."""
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(num / den)


def gradcheck(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> list[float]:
    """Relative error between backprop and central differences, one entry per param."""
    for p in params:
        p.zero_grad()
    backward(f())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    return [relative_error(a, numerical_grad(f, p, eps)) for a, p in zip(analytic, params)]
