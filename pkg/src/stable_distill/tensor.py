"""Dense-tensor engine with reverse-mode automatic differentiation.

Eager numpy ops record a tape of nodes; ``backward`` walks the ancestors of a
scalar seed in reverse creation order, which is a valid reverse topological
order because an op can only consume tensors that already exist. Training runs
in float32, verification in float64 (tests build float64 tensors directly).

Broadcasting is deliberately restricted: the only implicit broadcast is a
1-D bias added to / subtracted from every row of a 2-D tensor. Everything
else must match shapes exactly or use an explicit op.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import GradError, ShapeError

_ids = itertools.count()
_grad_enabled = True

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (teacher/eval forwards)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "backward_fn", "node_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        else:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self.grad = None
        self.op = "leaf"
        self.parents = ()
        self.backward_fn = None
        self.node_id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape}, dtype={self.data.dtype})"

    # operator sugar; scalars are python numbers, everything else a Tensor
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else scalar_add(self, other)

    def __radd__(self, other):
        return scalar_add(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else scalar_add(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scalar_mul(self, other)

    def __rmul__(self, other):
        return scalar_mul(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def make_node(data: np.ndarray, op: str, parents: Sequence[Tensor],
              backward_fn: Callable[[np.ndarray], None] | None) -> Tensor:
    """Record an op result. Skips tape bookkeeping when gradients are off."""
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.op = op
    t.node_id = next(_ids)
    if _grad_enabled and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t.parents = tuple(parents)
        t.backward_fn = backward_fn
    else:
        t.requires_grad = False
        t.parents = ()
        t.backward_fn = None
    return t


def accumulate(t: Tensor, g: np.ndarray):
    # backward closures never mutate the arrays they pass here, so the first
    # accumulation may hold a reference instead of copying
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad = t.grad + g


def backward(seed: Tensor):
    """Backpropagate from a scalar seed through its recorded ancestors.

    Gradients accumulate in reverse node-creation order (deterministic).
    """
    if seed.data.size != 1:
        raise GradError(f"backward seed must be scalar, got shape {seed.data.shape}")
    if not seed.requires_grad:
        raise GradError("backward seed does not require grad")
    nodes = []
    seen = set()
    stack = [seed]
    while stack:
        n = stack.pop()
        if id(n) in seen:
            continue
        seen.add(id(n))
        nodes.append(n)
        for p in n.parents:
            if p.requires_grad:
                stack.append(p)
    nodes.sort(key=lambda n: n.node_id, reverse=True)
    seed.grad = np.ones_like(seed.data)
    for n in nodes:
        if n.backward_fn is not None and n.grad is not None:
            n.backward_fn(n.grad)


def _as_const(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=like.data.dtype))


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape == b.data.shape:
        def bw(g):
            accumulate(a, g)
            accumulate(b, g)
        return make_node(a.data + b.data, "add", (a, b), bw)
    if a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]:
        # bias-add over the time axis, the one permitted broadcast
        def bw(g):
            accumulate(a, g)
            if b.requires_grad:
                accumulate(b, g.sum(axis=0))
        return make_node(a.data + b.data, "add", (a, b), bw)
    raise ShapeError("add", a.data.shape, b.data.shape)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape == b.data.shape:
        def bw(g):
            accumulate(a, g)
            accumulate(b, -g)
        return make_node(a.data - b.data, "sub", (a, b), bw)
    if a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]:
        def bw(g):
            accumulate(a, g)
            accumulate(b, -g.sum(axis=0))
        return make_node(a.data - b.data, "sub", (a, b), bw)
    raise ShapeError("sub", a.data.shape, b.data.shape)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError("mul", a.data.shape, b.data.shape)
    ad, bd = a.data, b.data

    def bw(g):
        if a.requires_grad:
            accumulate(a, g * bd)
        if b.requires_grad:
            accumulate(b, g * ad)
    return make_node(ad * bd, "mul", (a, b), bw)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        accumulate(a, g * c)
    return make_node(a.data * c, "scalar_mul", (a,), bw)


def scalar_add(a: Tensor, c: float) -> Tensor:
    def bw(g):
        accumulate(a, g)
    return make_node(a.data + float(c), "scalar_add", (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError("matmul", a.data.shape, b.data.shape)
    ad, bd = a.data, b.data

    def bw(g):
        if a.requires_grad:
            accumulate(a, g @ bd.T)
        if b.requires_grad:
            accumulate(b, ad.T @ g)
    return make_node(ad @ bd, "matmul", (a, b), bw)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over a shared leading axis: (n,i,k) @ (n,k,j)."""
    if (a.data.ndim != 3 or b.data.ndim != 3 or a.data.shape[0] != b.data.shape[0]
            or a.data.shape[2] != b.data.shape[1]):
        raise ShapeError("bmm", a.data.shape, b.data.shape)
    ad, bd = a.data, b.data

    def bw(g):
        if a.requires_grad:
            accumulate(a, g @ bd.transpose(0, 2, 1))
        if b.requires_grad:
            accumulate(b, ad.transpose(0, 2, 1) @ g)
    return make_node(ad @ bd, "bmm", (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose", a.data.shape)

    def bw(g):
        accumulate(a, g.T)
    return make_node(a.data.T, "transpose", (a,), bw)


def transpose_last2(a: Tensor) -> Tensor:
    """Swap the trailing two axes of a 3-D tensor."""
    if a.data.ndim != 3:
        raise ShapeError("transpose_last2", a.data.shape)

    def bw(g):
        accumulate(a, g.transpose(0, 2, 1))
    return make_node(a.data.transpose(0, 2, 1), "transpose_last2", (a,), bw)


# ---------------------------------------------------------------------------
# indexing / layout


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[start:stop] = g
            accumulate(a, full)
    return make_node(a.data[start:stop], "slice_rows", (a,), bw)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("slice_cols", a.data.shape)

    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[:, start:stop] = g
            accumulate(a, full)
    return make_node(a.data[:, start:stop], "slice_cols", (a,), bw)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Row gather over the time axis; indices may repeat."""
    idx = np.asarray(idx, dtype=np.intp)

    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            accumulate(a, full)
    return make_node(a.data[idx], "gather_rows", (a,), bw)


def replace_rows(a: Tensor, idx, row: Tensor) -> Tensor:
    """Overwrite rows ``idx`` of a (T,h) tensor with a learned (h,) vector."""
    idx = np.asarray(idx, dtype=np.intp)
    if a.data.ndim != 2 or row.data.shape != (a.data.shape[1],):
        raise ShapeError("replace_rows", a.data.shape, row.data.shape)
    out = a.data.copy()
    out[idx] = row.data
    n_rows = len(idx)

    def bw(g):
        if a.requires_grad:
            ga = g.copy()
            ga[idx] = 0.0
            accumulate(a, ga)
        if row.requires_grad and n_rows:
            accumulate(row, g[idx].sum(axis=0))
    return make_node(out, "replace_rows", (a, row), bw)


def concat_rows(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    sizes = [p.data.shape[0] for p in parts]

    def bw(g):
        off = 0
        for p, n in zip(parts, sizes):
            accumulate(p, g[off:off + n])
            off += n
    return make_node(np.concatenate([p.data for p in parts], axis=0), "concat_rows", parts, bw)


def concat_cols(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    sizes = [p.data.shape[1] for p in parts]

    def bw(g):
        off = 0
        for p, n in zip(parts, sizes):
            accumulate(p, g[:, off:off + n])
            off += n
    return make_node(np.concatenate([p.data for p in parts], axis=1), "concat_cols", parts, bw)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bw(g):
        accumulate(a, g.reshape(a.data.shape))
    return make_node(a.data.reshape(shape), "reshape", (a,), bw)


def split_heads(a: Tensor, num_heads: int) -> Tensor:
    """(T, h) -> (num_heads, T, h // num_heads)."""
    t, h = a.data.shape
    if h % num_heads:
        raise ShapeError("split_heads", a.data.shape)
    dh = h // num_heads

    def bw(g):
        accumulate(a, np.ascontiguousarray(g.transpose(1, 0, 2)).reshape(t, h))
    return make_node(a.data.reshape(t, num_heads, dh).transpose(1, 0, 2),
                     "split_heads", (a,), bw)


def merge_heads(a: Tensor) -> Tensor:
    """(num_heads, T, dh) -> (T, num_heads * dh). Inverse of split_heads."""
    nh, t, dh = a.data.shape

    def bw(g):
        accumulate(a, g.reshape(t, nh, dh).transpose(1, 0, 2))
    return make_node(np.ascontiguousarray(a.data.transpose(1, 0, 2)).reshape(t, nh * dh),
                     "merge_heads", (a,), bw)


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor) -> Tensor:
    def bw(g):
        accumulate(a, np.full_like(a.data, g))
    return make_node(np.asarray(np.sum(a.data), dtype=a.data.dtype), "sum", (a,), bw)


def tmean(a: Tensor) -> Tensor:
    # same summation as tsum so mean == sum / n holds exactly
    n = a.data.size

    def bw(g):
        accumulate(a, np.full_like(a.data, g / n))
    return make_node(np.asarray(np.sum(a.data) / n, dtype=a.data.dtype), "mean", (a,), bw)


# ---------------------------------------------------------------------------
# nonlinearities and normalizers


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def bw(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        accumulate(a, g * (cdf + x * pdf))
    return make_node((x * cdf).astype(x.dtype), "gelu", (a,), bw)


def texp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g):
        accumulate(a, g * out)
    return make_node(out, "exp", (a,), bw)


def tlog(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise ValueError("log: input must be strictly positive")
    x = a.data

    def bw(g):
        accumulate(a, g / x)
    return make_node(np.log(x), "log", (a,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise layer norm; eps sits inside the sqrt so constant rows map to 0."""
    xd = x.data if x.data.ndim == 2 else x.data.reshape(1, -1)
    h = xd.shape[1]
    if gain.data.shape != (h,) or bias.data.shape != (h,):
        raise ShapeError("layer_norm", x.data.shape, gain.data.shape)
    mu = xd.mean(axis=1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = (xhat * gain.data + bias.data).reshape(x.data.shape)

    def bw(g):
        gd = g.reshape(xd.shape)
        if gain.requires_grad:
            accumulate(gain, (gd * xhat).sum(axis=0))
        if bias.requires_grad:
            accumulate(bias, gd.sum(axis=0))
        if x.requires_grad:
            gx = gd * gain.data
            dx = (gx - gx.mean(axis=1, keepdims=True)
                  - xhat * (gx * xhat).mean(axis=1, keepdims=True)) * inv
            accumulate(x, dx.reshape(x.data.shape))
    return make_node(out.astype(x.data.dtype), "layer_norm", (x, gain, bias), bw)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis (stable)."""
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        accumulate(a, s * (g - dot))
    return make_node(s.astype(x.dtype), "softmax", (a,), bw)


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def bw(g):
        sm = np.exp(out)
        accumulate(a, g - sm * g.sum(axis=-1, keepdims=True))
    return make_node(out.astype(x.dtype), "log_softmax", (a,), bw)


# ---------------------------------------------------------------------------
# losses / similarity


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all entries of the squared difference."""
    if a.data.shape != b.data.shape:
        raise ShapeError("mse", a.data.shape, b.data.shape)
    diff = a.data - b.data
    n = diff.size

    def bw(g):
        base = (2.0 / n) * g * diff
        accumulate(a, base)
        accumulate(b, -base)
    return make_node(np.asarray(np.sum(diff * diff) / n, dtype=a.data.dtype), "mse", (a, b), bw)


def cosine_rows(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Per-row cosine similarity of two (n, h) tensors -> (n,)."""
    if a.data.shape != b.data.shape or a.data.ndim != 2:
        raise ShapeError("cosine_rows", a.data.shape, b.data.shape)
    ad, bd = a.data, b.data
    na = np.sqrt((ad * ad).sum(axis=1))
    nb = np.sqrt((bd * bd).sum(axis=1))
    denom = na * nb + eps
    dots = (ad * bd).sum(axis=1)
    c = dots / denom

    def bw(g):
        ge = (g / denom)[:, None]
        if a.requires_grad:
            da = ge * (bd - (c * nb / np.maximum(na, eps))[:, None] * ad)
            accumulate(a, da)
        if b.requires_grad:
            db = ge * (ad - (c * na / np.maximum(nb, eps))[:, None] * bd)
            accumulate(b, db)
    return make_node(c.astype(ad.dtype), "cosine_rows", (a, b), bw)
