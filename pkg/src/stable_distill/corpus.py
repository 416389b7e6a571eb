"""Synthetic two-domain "speech" corpora: generation, SDCP file I/O, batching.

Each utterance is a phoneme sequence rendered to feature frames: every
phoneme contributes a run of ``duration`` frames equal to ``mix @ prototype
+ bias`` plus isotropic Gaussian noise. A domain is a (mix, bias, sigma)
triple over a shared prototype inventory, so the source->target shift is a
single controllable dial. Generation derives one RNG per utterance from
(root seed, utterance index), which makes parallel and serial generation
agree bit-exactly.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (BadMagicError, ConfigMismatchError, TruncatedFileError,
                     UnsupportedVersionError)

MAGIC = b"SDCP"
VERSION = 1

SPLITS = ("train", "dev", "test")
_SPLIT_BYTE = {s: i + 1 for i, s in enumerate(SPLITS)}
_BYTE_SPLIT = {v: k for k, v in _SPLIT_BYTE.items()}

MAX_CONDITION = 50.0
DEFAULT_LABEL_RANGE = (8, 24)


@dataclass
class DomainSpec:
    domain: str
    prototypes: np.ndarray        # (P, d) unit rows, shared across a domain pair
    mix: np.ndarray               # (d, d), condition number < MAX_CONDITION
    bias: np.ndarray              # (d,)
    sigma: float
    dur_min: int = 2
    dur_max: int = 4
    prior: np.ndarray | None = None

    def __post_init__(self):
        self.prototypes = np.asarray(self.prototypes, dtype=np.float32)
        self.mix = np.asarray(self.mix, dtype=np.float32)
        self.bias = np.asarray(self.bias, dtype=np.float32)
        if self.prior is None:
            self.prior = np.full(self.num_phonemes, 1.0 / self.num_phonemes)
        self.prior = np.asarray(self.prior, dtype=np.float64)
        self.prior = self.prior / self.prior.sum()
        if self.sigma <= 0.0:
            raise ValueError("sigma must be positive")
        if np.linalg.cond(self.mix.astype(np.float64)) >= MAX_CONDITION:
            raise ValueError("mixing transform is too ill-conditioned")
        if not (1 <= self.dur_min <= self.dur_max):
            raise ValueError("bad duration range")

    @property
    def num_phonemes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.prototypes.shape[1]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.domain.encode())
        for arr in (self.prototypes, self.mix, self.bias, self.prior):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(struct.pack("<dii", self.sigma, self.dur_min, self.dur_max))
        return h.hexdigest()[:16]


@dataclass
class Utterance:
    utt_id: str
    domain: str
    frames: np.ndarray            # (T, d) float32
    labels: list[int]             # token ids in [1, P]

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_labels(self) -> int:
        return len(self.labels)


@dataclass
class Corpus:
    utterances: list[Utterance]
    split: str
    seed: int
    spec_digest: str
    domain: str = ""

    def __len__(self):
        return len(self.utterances)

    @property
    def feature_dim(self) -> int:
        return self.utterances[0].frames.shape[1]


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _well_conditioned(rng: np.random.Generator, base: np.ndarray,
                      perturb, max_tries: int = 100) -> np.ndarray:
    for _ in range(max_tries):
        cand = perturb(base, rng)
        if np.linalg.cond(cand) < MAX_CONDITION:
            return cand
    raise RuntimeError("could not sample a well-conditioned mixing transform")


def make_domain_pair(seed: int, shift: float = 1.0, num_phonemes: int = 12,
                     feature_dim: int = 16, sigma_source: float = 0.35,
                     sigma_target: float | None = None,
                     dur_min: int = 2, dur_max: int = 4,
                     ) -> tuple[DomainSpec, DomainSpec]:
    """Source/target specs sharing a prototype inventory.

    ``shift`` scales both the multiplicative perturbation of the mixing
    transform and the bias offset, so the domain gap grows monotonically
    with the dial (the random directions are drawn once per seed).
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xD0]))
    protos = _unit_rows(rng, num_phonemes, feature_dim)
    eye = np.eye(feature_dim)
    mix_s = _well_conditioned(
        rng, eye, lambda b, r: b + 0.15 * r.normal(size=b.shape) / np.sqrt(feature_dim))
    rot = rng.normal(size=(feature_dim, feature_dim)) / np.sqrt(feature_dim)
    offset = _unit_rows(rng, 1, feature_dim)[0]
    mix_t = _well_conditioned(
        rng, mix_s, lambda b, r: b @ (eye + shift * 0.6 * rot))
    src = DomainSpec(domain="source", prototypes=protos, mix=mix_s,
                     bias=np.zeros(feature_dim), sigma=sigma_source,
                     dur_min=dur_min, dur_max=dur_max)
    tgt = DomainSpec(domain="target", prototypes=protos, mix=mix_t,
                     bias=(shift * 0.8 * offset), sigma=sigma_target or sigma_source,
                     dur_min=dur_min, dur_max=dur_max)
    return src, tgt


def render_labels(spec: DomainSpec, labels, rng: np.random.Generator,
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Frames plus per-frame phoneme tokens for a given label sequence."""
    rows = []
    frame_labels = []
    for tok in labels:
        dur = int(rng.integers(spec.dur_min, spec.dur_max + 1))
        clean = spec.mix @ spec.prototypes[tok - 1] + spec.bias
        noise = rng.normal(0.0, spec.sigma, size=(dur, spec.feature_dim))
        rows.append(clean[None, :] + noise)
        frame_labels.extend([tok] * dur)
    frames = np.concatenate(rows, axis=0).astype(np.float32)
    return frames, np.asarray(frame_labels, dtype=np.intp)


def generate_corpus(spec: DomainSpec, count: int, split: str, seed: int,
                    label_range: tuple[int, int] = DEFAULT_LABEL_RANGE) -> Corpus:
    """Deterministic corpus: one derived RNG per utterance index."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    lo, hi = label_range
    utts = []
    for i in range(count):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=int(seed), spawn_key=(i,)))
        length = int(rng.integers(lo, hi + 1))
        labels = (rng.choice(spec.num_phonemes, size=length, p=spec.prior) + 1).tolist()
        frames, _ = render_labels(spec, labels, rng)
        utts.append(Utterance(utt_id=f"{spec.domain}-{split}-{seed}-{i:05d}",
                              domain=spec.domain, frames=frames, labels=labels))
    return Corpus(utterances=utts, split=split, seed=seed,
                  spec_digest=spec.digest(), domain=spec.domain)


def domain_gap_statistic(a: DomainSpec, b: DomainSpec, frames: int = 1000,
                         seed: int = 0) -> float:
    """Mean absolute per-dimension gap between domain frame means."""
    rng = np.random.default_rng([seed, 0x6A9])
    means = []
    for spec in (a, b):
        toks = rng.integers(1, spec.num_phonemes + 1, size=frames)
        clean = spec.prototypes[toks - 1] @ spec.mix.T + spec.bias
        noise = rng.normal(0.0, spec.sigma, size=clean.shape)
        means.append((clean + noise).mean(axis=0))
    return float(np.mean(np.abs(means[0] - means[1])))


# ---------------------------------------------------------------------------
# SDCP file format


def write_corpora(path, corpora: list[Corpus]) -> None:
    parts = [MAGIC, struct.pack("<B", VERSION), struct.pack("<I", len(corpora))]
    for c in corpora:
        digest = c.spec_digest.encode("utf-8")
        dom = c.domain.encode("utf-8")
        parts.append(struct.pack("<B", _SPLIT_BYTE[c.split]))
        parts.append(struct.pack("<q", c.seed))
        parts.append(struct.pack("<H", len(digest)))
        parts.append(digest)
        parts.append(struct.pack("<H", len(dom)))
        parts.append(dom)
        parts.append(struct.pack("<I", len(c.utterances)))
        for u in c.utterances:
            uid = u.utt_id.encode("utf-8")
            t, d = u.frames.shape
            parts.append(struct.pack("<H", len(uid)))
            parts.append(uid)
            parts.append(struct.pack("<II", t, d))
            parts.append(struct.pack("<I", len(u.labels)))
            parts.append(struct.pack(f"<{len(u.labels)}H", *u.labels))
            parts.append(np.ascontiguousarray(u.frames, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def write_corpus(corpus: Corpus, path) -> None:
    write_corpora(path, [corpus])


def read_corpora(path) -> list[Corpus]:
    buf = Path(path).read_bytes()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(buf):
            raise TruncatedFileError(f"corpus file truncated at byte {off}")
        out = buf[off:off + n]
        off += n
        return out

    def unpack(fmt):
        return struct.unpack(fmt, take(struct.calcsize(fmt)))

    if take(4) != MAGIC:
        raise BadMagicError(f"{path}: bad magic (not an SDCP corpus)")
    (version,) = unpack("<B")
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported version {version}")
    (n_corpora,) = unpack("<I")
    corpora = []
    for _ in range(n_corpora):
        (split_byte,) = unpack("<B")
        if split_byte not in _BYTE_SPLIT:
            raise UnsupportedVersionError(f"{path}: unknown split byte {split_byte}")
        (seed,) = unpack("<q")
        (dlen,) = unpack("<H")
        digest = take(dlen).decode("utf-8")
        (domlen,) = unpack("<H")
        domain = take(domlen).decode("utf-8")
        (count,) = unpack("<I")
        utts = []
        for _ in range(count):
            (ulen,) = unpack("<H")
            uid = take(ulen).decode("utf-8")
            t, d = unpack("<II")
            (llen,) = unpack("<I")
            labels = list(unpack(f"<{llen}H"))
            frames = np.frombuffer(take(4 * t * d), dtype="<f4").reshape(t, d).copy()
            utts.append(Utterance(utt_id=uid, domain=domain, frames=frames,
                                  labels=labels))
        corpora.append(Corpus(utterances=utts, split=_BYTE_SPLIT[split_byte],
                              seed=seed, spec_digest=digest, domain=domain))
    return corpora


def read_corpus(path) -> Corpus:
    corpora = read_corpora(path)
    if len(corpora) != 1:
        raise ValueError(f"{path} holds {len(corpora)} corpora; use read_corpora")
    return corpora[0]


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    utterances: list[Utterance]
    padded: np.ndarray            # (B, T_max, d), zero-padded
    lengths: np.ndarray           # (B,)

    def __len__(self):
        return len(self.utterances)


def make_batches(corpus: Corpus, batch_size: int, seed: int, epoch: int = 0,
                 ) -> list[Batch]:
    """Length-bucketed batches; order deterministic per (seed, epoch)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng([int(seed), 0xBA7C, int(epoch)])
    order = rng.permutation(len(corpus.utterances))
    by_len = sorted(order, key=lambda i: corpus.utterances[i].num_frames)
    chunks = [by_len[i:i + batch_size] for i in range(0, len(by_len), batch_size)]
    rng.shuffle(chunks)
    batches = []
    for chunk in chunks:
        utts = [corpus.utterances[i] for i in chunk]
        tmax = max(u.num_frames for u in utts)
        d = utts[0].frames.shape[1]
        padded = np.zeros((len(utts), tmax, d), dtype=np.float32)
        lengths = np.zeros(len(utts), dtype=np.intp)
        for j, u in enumerate(utts):
            padded[j, :u.num_frames] = u.frames
            lengths[j] = u.num_frames
        batches.append(Batch(utterances=utts, padded=padded, lengths=lengths))
    return batches


def require_feature_dim(corpus: Corpus, expected: int):
    if corpus.feature_dim != expected:
        raise ConfigMismatchError(
            f"corpus feature dim {corpus.feature_dim} != model feature dim {expected}")
