"""Masked-prediction pretext objective (contrastive or reconstruction).

Span masking follows the usual convention: every time index starts a span of
M frames with probability p; covered indices are deduplicated. Targets are
the pre-mask input-projection latents, treated as constants so the encoder
cannot shape its own targets (no quantizer exists to prevent collapse).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError


@dataclass(frozen=True)
class PretextConfig:
    kind: str = "contrastive"
    mask_prob: float = 0.25
    mask_span: int = 3
    num_negatives: int = 10
    temperature: float = 0.1

    def __post_init__(self):
        if not (0.0 < self.mask_prob <= 1.0):
            raise ValueError("mask_prob must be in (0, 1]")
        if self.num_negatives < 1:
            raise ValueError("num_negatives must be >= 1")
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")
        if self.kind not in ("contrastive", "reconstruction"):
            raise ValueError(f"unknown pretext kind {self.kind!r}")


@dataclass
class MaskSpec:
    indices: np.ndarray   # unique, sorted, < T
    span: int
    prob: float

    def __len__(self):
        return int(self.indices.size)


def sample_mask(tlen: int, cfg: PretextConfig, seed) -> MaskSpec:
    """Span mask over [0, tlen); guaranteed non-empty via a fallback start."""
    if tlen < cfg.mask_span:
        raise ValueError(f"sequence length {tlen} shorter than mask span {cfg.mask_span}")
    rng = np.random.default_rng(seed)
    starts = np.nonzero(rng.random(tlen) < cfg.mask_prob)[0]
    if starts.size == 0:
        starts = np.array([rng.integers(0, tlen)])
    covered = (starts[:, None] + np.arange(cfg.mask_span)[None, :]).reshape(-1)
    idx = np.unique(covered[covered < tlen])
    return MaskSpec(indices=idx.astype(np.intp), span=cfg.mask_span, prob=cfg.mask_prob)


def expected_masked_fraction(cfg: PretextConfig) -> float:
    """Interior-index coverage probability, the Monte-Carlo reference."""
    return 1.0 - (1.0 - cfg.mask_prob) ** cfg.mask_span


def _candidate_ids(mask: MaskSpec, tlen: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """(n, k+1) target row ids: column 0 the positive, then K negatives.

    Negatives come from the other masked indices of the same utterance
    (with replacement); with a single masked index they fall back to the
    remaining time indices, and degenerate T=1 repeats the positive.
    """
    idx = mask.indices
    n = idx.size
    ids = np.empty((n, k + 1), dtype=np.intp)
    ids[:, 0] = idx
    if n > 1:
        draws = rng.integers(0, n - 1, size=(n, k))
        pool = np.broadcast_to(idx, (n, n))
        # skip self: shift draws landing on or after own position
        own = np.arange(n)[:, None]
        draws = draws + (draws >= own)
        ids[:, 1:] = pool[np.arange(n)[:, None], draws]
    elif tlen > 1:
        others = np.delete(np.arange(tlen), idx[0])
        ids[:, 1:] = rng.choice(others, size=(1, k), replace=True)
    else:
        ids[:, 1:] = idx[0]
    return ids


def contrastive_pretext_loss(preds: T.Tensor, targets: T.Tensor, mask: MaskSpec,
                             cfg: PretextConfig, rng: np.random.Generator,
                             candidate_ids: np.ndarray | None = None) -> T.Tensor:
    """Masked InfoNCE over cosine similarities at temperature ``cfg.temperature``.

    ``preds`` are pretext-head outputs, ``targets`` the pre-mask latents.
    ``candidate_ids`` may be passed to freeze the negative draw (tests).
    """
    if preds.data.shape != targets.data.shape:
        raise ShapeError("contrastive_pretext_loss", preds.data.shape, targets.data.shape)
    if len(mask) == 0:
        raise ValueError("contrastive_pretext_loss: empty mask")
    tlen = preds.data.shape[0]
    k = cfg.num_negatives
    ids = (_candidate_ids(mask, tlen, k, rng) if candidate_ids is None
           else np.asarray(candidate_ids, dtype=np.intp))
    n = ids.shape[0]

    cand = T.gather_rows(targets, ids.reshape(-1))                  # (n*(k+1), h)
    anchors = T.gather_rows(preds, np.repeat(mask.indices, k + 1))  # aligned rows
    sims = T.scalar_mul(T.cosine_rows(anchors, cand), 1.0 / cfg.temperature)
    logp = T.log_softmax(T.reshape(sims, (n, k + 1)))
    return T.scalar_mul(T.tmean(T.slice_cols(logp, 0, 1)), -1.0)


def reconstruction_pretext_loss(preds: T.Tensor, targets: T.Tensor,
                                mask: MaskSpec) -> T.Tensor:
    """MSE between predictions and pre-mask latents, masked rows only."""
    if preds.data.shape != targets.data.shape:
        raise ShapeError("reconstruction_pretext_loss", preds.data.shape, targets.data.shape)
    if len(mask) == 0:
        raise ValueError("reconstruction_pretext_loss: empty mask")
    return T.mse(T.gather_rows(preds, mask.indices),
                 T.gather_rows(targets, mask.indices))


def pretext_loss(preds: T.Tensor, targets: T.Tensor, mask: MaskSpec,
                 cfg: PretextConfig, rng: np.random.Generator) -> T.Tensor:
    if cfg.kind == "contrastive":
        return contrastive_pretext_loss(preds, targets, mask, cfg, rng)
    return reconstruction_pretext_loss(preds, targets, mask)
