"""CTC loss (log-space forward recursion), greedy decoder, brute-force oracle.

Blank id is 0 everywhere; labels use token ids in [1, V). The loss node is
differentiable w.r.t. the log-prob lattice via the alpha/beta posterior.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError

BLANK = 0


@dataclass
class CtcResult:
    loss: T.Tensor
    feasible: bool
    log_prob: float  # log p(labels | lattice); -inf when infeasible


def validate_lattice(lattice: np.ndarray, tol: float = 1e-4) -> bool:
    """True when every row log-sum-exps to 0 within tol (proper log-probs)."""
    m = lattice.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(lattice - m).sum(axis=1))
    return bool(np.all(np.abs(lse) <= tol))


def extended_labels(labels) -> np.ndarray:
    ext = np.full(2 * len(labels) + 1, BLANK, dtype=np.intp)
    ext[1::2] = labels
    return ext


def min_frames(labels) -> int:
    """Shortest T admitting an alignment: L plus one blank per adjacent repeat."""
    labels = list(labels)
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _check_labels(labels, vocab: int):
    for tok in labels:
        if not (1 <= tok < vocab):
            raise ValueError(f"label token {tok} outside [1, {vocab})")


def ctc_loss(lattice: T.Tensor, labels) -> CtcResult:
    """Negative log-likelihood of ``labels`` under the (T, V) log-prob lattice.

    Returns an infeasibility-flagged +inf loss (no gradient path) when no
    blank-augmented alignment of the labels fits in T frames.
    """
    lat = lattice.data
    if lat.ndim != 2:
        raise ShapeError("ctc_loss", lat.shape)
    tlen, vocab = lat.shape
    labels = list(labels)
    _check_labels(labels, vocab)

    if tlen < min_frames(labels):
        inf = T.Tensor(np.asarray(np.inf, dtype=lat.dtype))
        return CtcResult(loss=inf, feasible=False, log_prob=-np.inf)

    ext = extended_labels(labels)
    s = len(ext)
    lp = lat[:, ext]  # (T, S)

    # skip transition s-2 -> s allowed when ext[s] is a label differing from ext[s-2]
    skip_ok = np.zeros(s, dtype=bool)
    if s > 2:
        skip_ok[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])

    neg_inf = np.float64(-np.inf)
    alphas = np.full((tlen, s), neg_inf)
    alphas[0, 0] = lp[0, 0]
    if s > 1:
        alphas[0, 1] = lp[0, 1]
    for t in range(1, tlen):
        prev = alphas[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        if s > 2:
            acc[2:] = np.where(skip_ok[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alphas[t] = acc + lp[t]

    tail = alphas[-1, -1] if s == 1 else np.logaddexp(alphas[-1, -1], alphas[-1, -2])
    log_prob = float(tail)

    def bw(g):
        if not lattice.requires_grad:
            return
        betas = np.full((tlen, s), neg_inf)
        betas[-1, -1] = 0.0
        if s > 1:
            betas[-1, -2] = 0.0
        for t in range(tlen - 2, -1, -1):
            nxt = betas[t + 1] + lp[t + 1]
            acc = nxt.copy()
            acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
            if s > 2:
                acc[:-2] = np.where(skip_ok[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
            betas[t] = acc
        gamma = np.exp(alphas + betas - log_prob)  # (T, S) posterior state occupancy
        grad = np.zeros((vocab, tlen))
        np.add.at(grad, ext, gamma.T)  # aggregate states sharing a symbol
        T.accumulate(lattice, ((-float(g)) * grad.T).astype(lat.dtype))

    loss = T.make_node(np.asarray(-log_prob, dtype=lat.dtype), "ctc", (lattice,), bw)
    return CtcResult(loss=loss, feasible=True, log_prob=log_prob)


def ctc_greedy_decode(lattice) -> list[int]:
    """Per-frame argmax (ties to the lowest id), collapse repeats, drop blanks."""
    lat = lattice.data if isinstance(lattice, T.Tensor) else np.asarray(lattice)
    best = np.argmax(lat, axis=1)
    out = []
    prev = -1
    for tok in best:
        if tok != prev and tok != BLANK:
            out.append(int(tok))
        prev = tok
    return out


def collapse(path) -> tuple[int, ...]:
    out = []
    prev = -1
    for tok in path:
        if tok != prev and tok != BLANK:
            out.append(int(tok))
        prev = tok
    return tuple(out)


def ctc_brute_force(lattice, labels) -> float:
    """Exact NLL by enumerating all V^T frame paths. Test oracle only."""
    lat = np.asarray(lattice.data if isinstance(lattice, T.Tensor) else lattice,
                     dtype=np.float64)
    tlen, vocab = lat.shape
    if tlen > 8 or vocab > 5:
        raise ValueError(f"brute force limited to T<=8, V<=5 (got T={tlen}, V={vocab})")
    labels = tuple(int(x) for x in labels)
    _check_labels(labels, vocab)
    probs = np.exp(lat)
    cols = [probs[t] for t in range(tlen)]
    total = 0.0
    for path in itertools.product(range(vocab), repeat=tlen):
        if collapse(path) == labels:
            p = 1.0
            for t, tok in enumerate(path):
                p *= cols[t][tok]
            total += p
    return float(-np.log(total)) if total > 0.0 else float(np.inf)
