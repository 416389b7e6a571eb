"""Checkpoint container and SDCK file format.

Layout: magic "SDCK" | version byte | u32 config-block length | key=value
text block | stage byte | u64 step | u32 tensor count | tensor records
(u16 name length, name, u8 rank, u32 extents, raw little-endian float32).
Tensors are written in canonical name order so stage-to-stage diffs are
bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import (BadMagicError, ConfigMismatchError, TruncatedFileError,
                     UnsupportedVersionError)
from .model import ModelConfig

MAGIC = b"SDCK"
VERSION = 1

STAGE_PRETRAINED = "pretrained"
STAGE_TEACHER_CP = "teacher_cp"
STAGE_STUDENT_SD = "student_sd"
STAGE_FINETUNED = "finetuned"
STAGE_BASELINE_CP = "baseline_cp"

STAGES = (STAGE_PRETRAINED, STAGE_TEACHER_CP, STAGE_STUDENT_SD,
          STAGE_FINETUNED, STAGE_BASELINE_CP)
_STAGE_BYTE = {name: i + 1 for i, name in enumerate(STAGES)}
_BYTE_STAGE = {v: k for k, v in _STAGE_BYTE.items()}


@dataclass
class Checkpoint:
    config: ModelConfig
    stage: str
    step: int
    tensors: dict[str, np.ndarray]          # float32, canonical order
    extra: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in _STAGE_BYTE:
            raise ValueError(f"unknown stage tag {self.stage!r}")

    @classmethod
    def from_params(cls, params: dict[str, T.Tensor], config: ModelConfig,
                    stage: str, step: int, extra: dict[str, str] | None = None) -> "Checkpoint":
        tensors = {k: v.data.astype(np.float32, copy=True) for k, v in params.items()}
        return cls(config=config, stage=stage, step=step, tensors=tensors,
                   extra=dict(extra or {}))

    def to_params(self, trainable: bool = True) -> dict[str, T.Tensor]:
        params = {}
        for name, arr in self.tensors.items():
            grad = trainable and name != "pos_table"
            params[name] = T.Tensor(arr.copy(), requires_grad=grad)
        return params

    def same_config(self, other: "Checkpoint") -> bool:
        return self.config == other.config


def _kv_block(config: ModelConfig, extra: dict[str, str]) -> bytes:
    lines = [f"{k}={v}" for k, v in config.to_kv().items()]
    lines += [f"{k}={v}" for k, v in sorted(extra.items())]
    return ("\n".join(lines) + "\n").encode("utf-8")


def _parse_kv(blob: bytes) -> dict[str, str]:
    kv = {}
    for line in blob.decode("utf-8").splitlines():
        line = line.strip()
        if line and "=" in line:
            k, v = line.split("=", 1)
            kv[k] = v
    return kv


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    parts = [MAGIC, struct.pack("<B", VERSION)]
    kv = _kv_block(ckpt.config, ckpt.extra)
    parts.append(struct.pack("<I", len(kv)))
    parts.append(kv)
    parts.append(struct.pack("<B", _STAGE_BYTE[ckpt.stage]))
    parts.append(struct.pack("<Q", ckpt.step))
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise TruncatedFileError(
                f"checkpoint truncated at byte {self.off} (wanted {n} more)")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise BadMagicError(f"{path}: bad magic (not an SDCK checkpoint)")
    (version,) = r.unpack("<B")
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported version {version}")
    (kv_len,) = r.unpack("<I")
    kv = _parse_kv(r.take(kv_len))
    config = ModelConfig.from_kv(kv)
    extra = {k: v for k, v in kv.items() if k not in config.to_kv()}
    (stage_byte,) = r.unpack("<B")
    if stage_byte not in _BYTE_STAGE:
        raise UnsupportedVersionError(f"{path}: unknown stage byte {stage_byte}")
    (step,) = r.unpack("<Q")
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I") if rank else ()
        n = int(np.prod(shape)) if shape else 1
        raw = r.take(4 * n)
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return Checkpoint(config=config, stage=_BYTE_STAGE[stage_byte], step=step,
                      tensors=tensors, extra=extra)


def checkpoints_equal(a: Checkpoint, b: Checkpoint) -> bool:
    if a.config != b.config or set(a.tensors) != set(b.tensors):
        return False
    return all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)


def require_same_config(a: Checkpoint, b: Checkpoint, what: str = "checkpoints"):
    if a.config != b.config:
        raise ConfigMismatchError(f"{what} have different model configs")
