"""Toy transformer encoder standing in for the SSL model.

Pre-norm blocks with a final layer norm; the encoder output used for
distillation and for the pretext/CTC heads is that post-norm last-block
output. Masked positions are replaced by a learned embedding after the
input projection, before positions are added.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigMismatchError

PRETEXT_KINDS = ("contrastive", "reconstruction")


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 16
    hidden_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ffn_dim: int = 128
    max_time: int = 256
    vocab_size: int = 14  # 12 phonemes + blank + pad
    pretext: str = "contrastive"

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2 (needs at least blank + one token)")
        if self.pretext not in PRETEXT_KINDS:
            raise ValueError(f"unknown pretext kind {self.pretext!r}")

    def to_kv(self) -> dict[str, str]:
        return {
            "feature_dim": str(self.feature_dim),
            "hidden_dim": str(self.hidden_dim),
            "num_layers": str(self.num_layers),
            "num_heads": str(self.num_heads),
            "ffn_dim": str(self.ffn_dim),
            "max_time": str(self.max_time),
            "vocab_size": str(self.vocab_size),
            "pretext": self.pretext,
        }

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "ModelConfig":
        ints = ("feature_dim", "hidden_dim", "num_layers", "num_heads",
                "ffn_dim", "max_time", "vocab_size")
        args = {k: int(kv[k]) for k in ints}
        args["pretext"] = kv.get("pretext", "contrastive")
        return cls(**args)


def canonical_names(config: ModelConfig, include_ctc: bool = False) -> list[str]:
    """Ordered tensor names; this order is the checkpoint/diff contract."""
    names = ["input_proj.weight", "input_proj.bias", "pos_table", "mask_embed"]
    for i in range(config.num_layers):
        p = f"layers.{i}."
        names += [p + "attn_norm.gain", p + "attn_norm.bias"]
        for part in ("wq", "wk", "wv", "wo"):
            names += [p + f"attn.{part}.weight", p + f"attn.{part}.bias"]
        names += [p + "ffn_norm.gain", p + "ffn_norm.bias",
                  p + "ffn.w1.weight", p + "ffn.w1.bias",
                  p + "ffn.w2.weight", p + "ffn.w2.bias"]
    names += ["final_norm.gain", "final_norm.bias",
              "pretext_head.weight", "pretext_head.bias"]
    if include_ctc:
        names += ["ctc_head.weight", "ctc_head.bias"]
    return names


def sinusoid_table(max_time: int, dim: int) -> np.ndarray:
    pos = np.arange(max_time, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / dim)
    table = np.zeros((max_time, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table.astype(np.float32)


def _shape_of(name: str, config: ModelConfig) -> tuple[int, ...]:
    d, h, f, v = (config.feature_dim, config.hidden_dim, config.ffn_dim,
                  config.vocab_size)
    if name == "input_proj.weight":
        return (d, h)
    if name == "pos_table":
        return (config.max_time, h)
    if name in ("input_proj.bias", "mask_embed"):
        return (h,)
    if name.endswith(("norm.gain", "norm.bias")):
        return (h,)
    if ".attn." in name:
        return (h, h) if name.endswith("weight") else (h,)
    if "ffn.w1" in name:
        return (h, f) if name.endswith("weight") else (f,)
    if "ffn.w2" in name:
        return (f, h) if name.endswith("weight") else (h,)
    if name.startswith("pretext_head"):
        return (h, h) if name.endswith("weight") else (h,)
    if name.startswith("ctc_head"):
        return (h, v) if name.endswith("weight") else (v,)
    raise KeyError(name)


def _init_tensor(name: str, shape, rng: np.random.Generator) -> T.Tensor:
    if name == "pos_table":
        return T.Tensor(sinusoid_table(*shape), requires_grad=False)
    if name.endswith("norm.gain"):
        return T.Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)
    if name.endswith(("norm.bias", ".bias")):
        return T.Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)
    data = rng.normal(0.0, 0.02, size=shape).astype(np.float32)
    return T.Tensor(data, requires_grad=True)


def init_params(config: ModelConfig, seed: int, include_ctc: bool = False) -> dict[str, T.Tensor]:
    """Deterministic scaled-normal init; layer norms start at identity."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1A17]))
    return {name: _init_tensor(name, _shape_of(name, config), rng)
            for name in canonical_names(config, include_ctc)}


def add_ctc_head(params: dict[str, T.Tensor], config: ModelConfig, seed: int) -> dict[str, T.Tensor]:
    """Return params extended with a freshly initialized linear CTC head."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xC7C]))
    out = dict(params)
    out["ctc_head.weight"] = _init_tensor("ctc_head.weight",
                                          _shape_of("ctc_head.weight", config), rng)
    out["ctc_head.bias"] = _init_tensor("ctc_head.bias",
                                        _shape_of("ctc_head.bias", config), rng)
    return out


def clone_params(params: dict[str, T.Tensor]) -> dict[str, T.Tensor]:
    """Deep, independent copy (no aliasing with the source)."""
    return {k: T.Tensor(v.data.copy(), requires_grad=v.requires_grad)
            for k, v in params.items()}


def trainable(params: dict[str, T.Tensor]) -> dict[str, T.Tensor]:
    return {k: v for k, v in params.items() if v.requires_grad}


def freeze(params: dict[str, T.Tensor]) -> dict[str, T.Tensor]:
    for v in params.values():
        v.requires_grad = False
    return params


@dataclass
class ForwardOut:
    reps: T.Tensor           # (T, h) final-layer representations (post final norm)
    latents: T.Tensor        # (T, h) pre-mask input-projection outputs, detached
    mask_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))


def forward(params: dict[str, T.Tensor], config: ModelConfig, feats,
            mask_indices=None) -> ForwardOut:
    """Encode a (T, d) feature matrix; optionally mask time indices."""
    x = feats if isinstance(feats, T.Tensor) else T.Tensor(np.asarray(feats))
    tlen = x.data.shape[0]
    if tlen > config.max_time:
        raise ValueError(f"sequence length {tlen} exceeds max_time {config.max_time}")
    if x.data.shape[1] != config.feature_dim:
        raise ConfigMismatchError(
            f"feature dim {x.data.shape[1]} != model feature_dim {config.feature_dim}")

    latents = T.add(T.matmul(x, params["input_proj.weight"]), params["input_proj.bias"])
    targets = latents.detach()

    mask_indices = (np.zeros(0, dtype=np.intp) if mask_indices is None
                    else np.asarray(mask_indices, dtype=np.intp))
    h = latents
    if mask_indices.size:
        h = T.replace_rows(h, mask_indices, params["mask_embed"])
    h = T.add(h, T.slice_rows(params["pos_table"], 0, tlen))

    scale = 1.0 / math.sqrt(config.hidden_dim // config.num_heads)
    for i in range(config.num_layers):
        p = f"layers.{i}."
        a = T.layer_norm(h, params[p + "attn_norm.gain"], params[p + "attn_norm.bias"])
        q = T.split_heads(T.add(T.matmul(a, params[p + "attn.wq.weight"]),
                                params[p + "attn.wq.bias"]), config.num_heads)
        k = T.split_heads(T.add(T.matmul(a, params[p + "attn.wk.weight"]),
                                params[p + "attn.wk.bias"]), config.num_heads)
        v = T.split_heads(T.add(T.matmul(a, params[p + "attn.wv.weight"]),
                                params[p + "attn.wv.bias"]), config.num_heads)
        att = T.softmax(T.scalar_mul(T.bmm(q, T.transpose_last2(k)), scale))
        ctx = T.merge_heads(T.bmm(att, v))
        o = T.add(T.matmul(ctx, params[p + "attn.wo.weight"]), params[p + "attn.wo.bias"])
        h = T.add(h, o)

        f = T.layer_norm(h, params[p + "ffn_norm.gain"], params[p + "ffn_norm.bias"])
        f = T.gelu(T.add(T.matmul(f, params[p + "ffn.w1.weight"]), params[p + "ffn.w1.bias"]))
        f = T.add(T.matmul(f, params[p + "ffn.w2.weight"]), params[p + "ffn.w2.bias"])
        h = T.add(h, f)

    reps = T.layer_norm(h, params["final_norm.gain"], params["final_norm.bias"])
    return ForwardOut(reps=reps, latents=targets, mask_indices=mask_indices)


def encode(params: dict[str, T.Tensor], config: ModelConfig, feats,
           mask_indices=None) -> T.Tensor:
    """Final-layer (T, h) representations; the distillation operand."""
    return forward(params, config, feats, mask_indices).reps


def pretext_predictions(params: dict[str, T.Tensor], out: ForwardOut) -> T.Tensor:
    return T.add(T.matmul(out.reps, params["pretext_head.weight"]),
                 params["pretext_head.bias"])


def ctc_lattice(params: dict[str, T.Tensor], config: ModelConfig, feats) -> T.Tensor:
    """Log-prob lattice (T, V) from the CTC head over encoder output."""
    reps = encode(params, config, feats)
    logits = T.add(T.matmul(reps, params["ctc_head.weight"]), params["ctc_head.bias"])
    return T.log_softmax(logits)
