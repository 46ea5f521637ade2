"""Dense tensors with define-by-run reverse-mode differentiation.

Every op builds a node only when gradients are enabled and at least one
input requires them. ``backward`` linearises the graph reachable from the
output into a :class:`ComputeGraph` and walks it in reverse, accumulating
into the ``grad`` buffers of leaf tensors.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class _Node:
    __slots__ = ("op", "parents", "backward")

    def __init__(self, op: str, parents: tuple, backward: Callable):
        self.op = op
        self.parents = parents
        self.backward = backward


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._node: _Node | None = None

    # -- basic properties -------------------------------------------------
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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    # -- operators ----------------------------------------------------------
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
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def backward(self, grad=None) -> None:
        backward(self, grad)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(op, tuple(parents), backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Graph linearisation and the backward pass
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NodeRecord:
    op: str
    input_ids: tuple[int, ...]
    output_id: int


class ComputeGraph:
    """Topologically ordered records of the ops that produced ``output``.

    Ids are positions in ``tensors``; leaves get ids but no record.
    """

    def __init__(self, output: Tensor):
        self.tensors: list[Tensor] = []
        self.nodes: list[NodeRecord] = []
        ids: dict[int, int] = {}

        # iterative post-order DFS so deep graphs do not hit the recursion limit
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if id(t) in ids:
                continue
            if expanded or t._node is None:
                ids[id(t)] = len(self.tensors)
                self.tensors.append(t)
                if t._node is not None:
                    self.nodes.append(
                        NodeRecord(
                            t._node.op,
                            tuple(ids[id(p)] for p in t._node.parents),
                            ids[id(t)],
                        )
                    )
                continue
            stack.append((t, True))
            for p in reversed(t._node.parents):
                if id(p) not in ids and p.requires_grad:
                    stack.append((p, False))
                elif id(p) not in ids:
                    ids[id(p)] = len(self.tensors)
                    self.tensors.append(p)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, grad: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {self.nodes[-1].output_id if self.nodes else 0: grad}
        for rec in reversed(self.nodes):
            g = grads.pop(rec.output_id, None)
            if g is None:
                continue
            node = self.tensors[rec.output_id]._node
            in_grads = node.backward(g)
            for pid, pg in zip(rec.input_ids, in_grads):
                if pg is None or not self.tensors[pid].requires_grad:
                    continue
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        # whatever remains belongs to leaves
        for tid, g in grads.items():
            t = self.tensors[tid]
            if t._node is not None or not t.requires_grad:
                continue
            g = np.asarray(g, dtype=t.dtype)
            if t.grad is None:
                t.grad = g.copy()
            else:
                t.grad += g


def backward(output: Tensor, grad=None) -> None:
    if not output.requires_grad:
        raise RuntimeError("backward() on a tensor that does not require grad")
    if grad is None:
        if output.size != 1:
            raise RuntimeError("grad must be given for non-scalar outputs")
        grad = np.ones_like(output.data)
    grad = np.asarray(grad, dtype=output.dtype)
    if output._node is None:
        output.grad = grad.copy() if output.grad is None else output.grad + grad
        return
    ComputeGraph(output).backward(grad)


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _make(
        a.data + b.data,
        "add",
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _make(
        a.data - b.data,
        "sub",
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, "mul", (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                # weight matrix shared across the batch: fold batch into rows
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, "matmul", (a, b), bw)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(
        np.transpose(x.data, axes), "transpose", (x,), lambda g: (np.transpose(g, inv),)
    )


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(
        np.asarray(x.data.sum()),
        "sum",
        (x,),
        lambda g: (np.broadcast_to(g, shape).copy(),),
    )


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _make(
        np.asarray(x.data.mean()),
        "mean",
        (x,),
        lambda g: (np.full(shape, g / n, dtype=x.dtype),),
    )


def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = 1.0 / (1.0 + np.exp(-xd))
    out = xd * sig
    return _make(out, "silu", (x,), lambda g: (g * (sig * (1.0 + xd * (1.0 - sig))),))


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("token ids must be integers")
    n = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"token id outside [0, {n})")

    def bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _make(weight.data[ids], "embedding", (weight,), bw)


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    xd, wd = x.data, weight.data
    d = xd.shape[-1]
    inv = 1.0 / np.sqrt(np.mean(xd * xd, axis=-1, keepdims=True) + eps)
    xhat = xd * inv

    def bw(g):
        gw = None
        if weight.requires_grad:
            gw = (g * xhat).reshape(-1, d).sum(axis=0)
        gx = None
        if x.requires_grad:
            gh = g * wd
            gx = inv * (gh - xhat * np.mean(gh * xhat, axis=-1, keepdims=True))
        return gx, gw

    return _make(xhat * wd, "rms_norm", (x, weight), bw)


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` is a boolean array broadcastable to ``x``; False entries are
    excluded and get probability exactly 0. Every row must keep at least
    one entry.
    """
    xd = x.data
    if xd.shape[-1] < 1:
        raise ValueError("softmax over an empty axis")
    if not np.all(np.isfinite(xd)):
        raise FloatingPointError("softmax_rows: non-finite input")
    z = xd if mask is None else np.where(mask, xd, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _make(y, "softmax", (x,), bw)


def rope_rotate(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate interleaved pairs (x[2i], x[2i+1]) by per-position angles.

    ``cos``/``sin`` have last dim d/2 and broadcast against x[..., ::2].
    """
    xd = x.data
    if xd.shape[-1] % 2:
        raise ValueError("rotary embedding needs an even last dimension")
    x0, x1 = xd[..., 0::2], xd[..., 1::2]
    out = np.empty_like(xd)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos

    def bw(g):
        g0, g1 = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = g0 * cos + g1 * sin
        gx[..., 1::2] = -g0 * sin + g1 * cos
        return (gx,)

    return _make(out, "rope", (x,), bw)


# ---------------------------------------------------------------------------
# Losses and similarity kernels
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean of -log softmax(logits)[target] over every leading position."""
    ld = logits.data
    v = ld.shape[-1]
    targets = np.asarray(targets)
    if targets.shape != ld.shape[:-1]:
        raise ValueError(f"targets shape {targets.shape} does not match logits {ld.shape}")
    if targets.dtype.kind not in "iu":
        raise TypeError("targets must be integers")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"target outside vocabulary range [0, {v})")
    flat = ld.reshape(-1, v)
    tflat = targets.reshape(-1)
    n = flat.shape[0]
    z = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logp = z[np.arange(n), tflat] - lse
    loss = -logp.mean()

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), tflat] -= 1.0
        return ((g / n) * p.reshape(ld.shape),)

    return _make(np.asarray(loss, dtype=ld.dtype), "cross_entropy", (logits,), bw)


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity along the last axis; output drops that axis.

    Zero-norm rows raise instead of silently returning 0.
    """
    ad, bd = a.data, b.data
    if ad.shape != bd.shape:
        raise ValueError(f"shape mismatch {ad.shape} vs {bd.shape}")
    na = np.sqrt(np.sum(ad * ad, axis=-1, keepdims=True))
    nb = np.sqrt(np.sum(bd * bd, axis=-1, keepdims=True))
    if np.any(na == 0) or np.any(nb == 0):
        raise ZeroDivisionError("cosine similarity of a zero-norm vector")
    dot = np.sum(ad * bd, axis=-1, keepdims=True)
    c = dot / (na * nb)

    def bw(g):
        g = g[..., None]
        ga = gb = None
        if a.requires_grad:
            ga = g * (bd / (na * nb) - c * ad / (na * na))
        if b.requires_grad:
            gb = g * (ad / (na * nb) - c * bd / (nb * nb))
        return ga, gb

    return _make(c[..., 0], "cosine", (a, b), bw)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Scalar cosine similarity of two vectors."""
    if a.ndim != 1:
        raise ValueError("cosine_similarity expects vectors; use cosine_rows for batches")
    return cosine_rows(a, b)


# ---------------------------------------------------------------------------
# Finite-difference gradient check
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    analytic: np.ndarray
    numeric: np.ndarray

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-3,
    scale_floor: float = 1e-2,
    indices: Sequence[int] | None = None,
) -> GradCheckReport:
    """Compare the analytic gradient of scalar ``f`` at ``x`` with central differences.

    The relative error of component i is ``|a_i - n_i| / max(|a_i|, |n_i|, s)``
    with ``s = scale_floor * max_j max(|a_j|, |n_j|)``. The floor stops
    components that are tiny next to the rest of the gradient, where the
    O(eps^2) truncation term dominates, from swamping the report.
    ``indices`` restricts the comparison to a subset of flat positions.
    ``x.data`` is restored on return.
    """
    if not 1e-5 <= eps <= 1e-2:
        raise ValueError("eps must lie in [1e-5, 1e-2]")
    x.data = np.ascontiguousarray(x.data)
    base = x.data.copy()
    x.requires_grad = True
    x.grad = None
    out = f(x)
    if out.size != 1:
        raise ValueError("grad_check needs a scalar function")
    again = f(x).item()
    if again != out.item():
        raise RuntimeError("grad_check: f is not deterministic")
    out.backward()
    analytic = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).copy()
    x.grad = None

    flat = x.data.reshape(-1)
    idx = range(x.size) if indices is None else indices
    numeric = np.full(x.size, np.nan)
    try:
        with no_grad():
            for i in idx:
                flat[i] = base.flat[i] + eps
                fp = f(x).item()
                flat[i] = base.flat[i] - eps
                fm = f(x).item()
                flat[i] = base.flat[i]
                numeric[i] = (fp - fm) / (2 * eps)
    finally:
        x.data[...] = base
    sel = np.asarray(list(idx), dtype=np.int64)
    a, n = analytic[sel], numeric[sel]
    abs_err = np.abs(a - n)
    mag = np.maximum(np.abs(a), np.abs(n))
    floor = max(scale_floor * float(mag.max(initial=0.0)), np.finfo(np.float64).tiny)
    rel = abs_err / np.maximum(mag, floor)
    return GradCheckReport(
        max_rel_error=float(rel.max(initial=0.0)),
        max_abs_error=float(abs_err.max(initial=0.0)),
        analytic=analytic,
        numeric=numeric,
    )
