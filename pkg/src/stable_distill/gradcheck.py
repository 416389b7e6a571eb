"""Finite-difference verification of backward rules.

``finite_difference_check`` compares analytic gradients against central
differences in float64. ``primitive_audit`` runs the check for every
registered primitive at random points; the losses register themselves here
too so one audit covers the whole differentiable surface.
"""

from __future__ import annotations

import zlib
from typing import Callable, Sequence

import numpy as np

from . import tensor as T


def finite_difference_check(fn: Callable[..., T.Tensor],
                            inputs: Sequence[T.Tensor],
                            eps: float = 1e-5) -> float:
    """Max relative error |analytic - central| / (|analytic| + 1e-8).

    ``fn`` must map the input tensors to a scalar Tensor and be deterministic;
    inputs should be float64 for the stated tolerances to be meaningful.
    """
    out = fn(*inputs)
    T.backward(out)
    analytic = [np.zeros_like(x.data) if x.grad is None else np.array(x.grad) for x in inputs]
    for x in inputs:
        x.zero_grad()

    worst = 0.0
    with T.no_grad():
        for x, an in zip(inputs, analytic):
            flat = x.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = float(fn(*inputs).data)
                flat[i] = orig - eps
                f_minus = float(fn(*inputs).data)
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                a = an.reshape(-1)[i]
                rel = abs(a - numeric) / (abs(a) + 1e-8)
                if rel > worst:
                    worst = rel
    return worst


def _weights_for(t: T.Tensor, rng: np.random.Generator) -> T.Tensor:
    return T.Tensor(rng.normal(size=t.data.shape), dtype=np.float64)


def _scalarized(op: Callable, *const_args, **kw):
    """Wrap an op so its output reduces to a scalar via a fixed weighting."""
    def build(rng: np.random.Generator, *shapes):
        inputs = [T.Tensor(rng.normal(size=s), requires_grad=True, dtype=np.float64)
                  for s in shapes]
        probe = op(*inputs, *const_args, **kw)
        w = T.Tensor(np.random.default_rng(7).normal(size=probe.data.shape), dtype=np.float64)

        def fn(*xs):
            out = op(*xs, *const_args, **kw)
            if out.data.size == 1:
                return out
            return T.tsum(T.mul(out, w) if out.data.shape == w.data.shape else out)
        return fn, inputs
    return build


def _case_layer_norm(rng):
    x = T.Tensor(rng.normal(size=(4, 8)), requires_grad=True, dtype=np.float64)
    gain = T.Tensor(rng.normal(size=8), requires_grad=True, dtype=np.float64)
    bias = T.Tensor(rng.normal(size=8), requires_grad=True, dtype=np.float64)
    w = T.Tensor(rng.normal(size=(4, 8)), dtype=np.float64)
    return (lambda a, g, b: T.tsum(T.mul(T.layer_norm(a, g, b), w))), [x, gain, bias]


def _case_replace_rows(rng):
    x = T.Tensor(rng.normal(size=(6, 5)), requires_grad=True, dtype=np.float64)
    row = T.Tensor(rng.normal(size=5), requires_grad=True, dtype=np.float64)
    w = T.Tensor(rng.normal(size=(6, 5)), dtype=np.float64)
    idx = np.array([1, 4])
    return (lambda a, r: T.tsum(T.mul(T.replace_rows(a, idx, r), w))), [x, row]


def _case_concat(op, shapes):
    def build(rng):
        parts = [T.Tensor(rng.normal(size=s), requires_grad=True, dtype=np.float64)
                 for s in shapes]
        full = op(parts)
        w = T.Tensor(rng.normal(size=full.data.shape), dtype=np.float64)
        return (lambda *ps: T.tsum(T.mul(op(list(ps)), w))), parts
    return build


def _case_log(rng):
    # log requires strictly positive inputs
    x = T.Tensor(np.abs(rng.normal(size=(4, 3))) + 0.5, requires_grad=True, dtype=np.float64)
    w = T.Tensor(rng.normal(size=(4, 3)), dtype=np.float64)
    return (lambda a: T.tsum(T.mul(T.tlog(a), w))), [x]


def _simple(op, *shapes, **kw):
    def build(rng):
        fn, inputs = _scalarized(op, **kw)(rng, *shapes)
        return fn, inputs
    return build


PRIMITIVE_CASES: dict[str, Callable] = {
    "matmul": _simple(T.matmul, (3, 4), (4, 3)),
    "bmm": _simple(T.bmm, (2, 3, 4), (2, 4, 3)),
    "add": _simple(T.add, (4, 5), (4, 5)),
    "add_bias": _simple(T.add, (4, 5), (5,)),
    "sub": _simple(T.sub, (4, 5), (4, 5)),
    "mul": _simple(T.mul, (4, 5), (4, 5)),
    "scalar_mul": _simple(lambda a: T.scalar_mul(a, 1.7), (4, 3)),
    "transpose": _simple(T.transpose, (3, 5)),
    "transpose_last2": _simple(T.transpose_last2, (2, 3, 4)),
    "slice_rows": _simple(lambda a: T.slice_rows(a, 1, 4), (6, 3)),
    "slice_cols": _simple(lambda a: T.slice_cols(a, 1, 3), (4, 6)),
    "gather_rows": _simple(lambda a: T.gather_rows(a, np.array([0, 2, 2, 5])), (6, 3)),
    "replace_rows": _case_replace_rows,
    "concat_rows": _case_concat(T.concat_rows, [(2, 4), (3, 4)]),
    "concat_cols": _case_concat(T.concat_cols, [(3, 2), (3, 4)]),
    "reshape": _simple(lambda a: T.reshape(a, (2, 6)), (3, 4)),
    "split_heads": _simple(lambda a: T.split_heads(a, 2), (5, 6)),
    "merge_heads": _simple(T.merge_heads, (2, 5, 3)),
    "sum": _simple(T.tsum, (4, 5)),
    "mean": _simple(T.tmean, (4, 5)),
    "gelu": _simple(T.gelu, (4, 5)),
    "exp": _simple(T.texp, (4, 3)),
    "log": _case_log,
    "layer_norm": _case_layer_norm,
    "softmax": _simple(T.softmax, (4, 6)),
    "softmax3d": _simple(T.softmax, (2, 3, 5)),
    "log_softmax": _simple(T.log_softmax, (4, 6)),
    "mse": _simple(T.mse, (4, 5), (4, 5)),
    "cosine_rows": _simple(T.cosine_rows, (5, 7), (5, 7)),
}


def primitive_audit(points: int = 20, seed: int = 0, eps: float = 1e-5,
                    cases: dict[str, Callable] | None = None) -> dict[str, float]:
    """Run finite-difference checks for every registered case.

    Returns the max relative error per case over ``points`` random samples.
    """
    cases = PRIMITIVE_CASES if cases is None else cases
    results = {}
    for name, factory in cases.items():
        tag = zlib.crc32(name.encode())
        worst = 0.0
        for p in range(points):
            rng = np.random.default_rng([seed, p, tag])
            fn, inputs = factory(rng)
            worst = max(worst, finite_difference_check(fn, inputs, eps=eps))
        results[name] = worst
    return results
