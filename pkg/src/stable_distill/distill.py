"""Joint self-distillation + pretext objective and the student update step.

The total loss is distillation term + alpha * pretext term, where the
distillation term compares student and teacher final-layer representations
of the same masked input and the teacher runs without gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigMismatchError, DivergenceError, ShapeError
from .model import ModelConfig, forward, pretext_predictions
from .pretext import PretextConfig, pretext_loss, sample_mask

DISTILL_NORMS = ("mse", "l2")


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 0.01
    norm: str = "mse"                 # "l2" uses the unsquared Frobenius norm
    teacher_input: str = "masked"     # teacher sees the student's mask, or "clean"

    def __post_init__(self):
        if self.alpha < 0.0:
            raise ValueError("alpha must be >= 0")
        if self.norm not in DISTILL_NORMS:
            raise ValueError(f"unknown distill norm {self.norm!r}")
        if self.teacher_input not in ("masked", "clean"):
            raise ValueError(f"unknown teacher_input {self.teacher_input!r}")


@dataclass
class DistillStepReport:
    step: int
    mse: float
    pretext: float
    total: float
    grad_norm: float = 0.0


def distillation_mse(student_repr: T.Tensor, teacher_repr: T.Tensor) -> T.Tensor:
    """Mean squared difference; the teacher operand carries no gradient."""
    if student_repr.data.shape != teacher_repr.data.shape:
        raise ShapeError("distillation_mse", student_repr.data.shape,
                         teacher_repr.data.shape)
    return T.mse(student_repr, teacher_repr.detach())


def _distill_term(student_repr: T.Tensor, teacher_repr: T.Tensor,
                  cfg: DistillConfig) -> T.Tensor:
    if cfg.norm == "mse":
        return distillation_mse(student_repr, teacher_repr)
    diff = T.sub(student_repr, teacher_repr.detach())
    # sqrt via exp(0.5 log x); guarded away from 0
    sq = T.scalar_add(T.tsum(T.mul(diff, diff)), 1e-12)
    return T.texp(T.scalar_mul(T.tlog(sq), 0.5))


def stable_distill_loss(student: dict[str, T.Tensor], teacher: dict[str, T.Tensor],
                        config: ModelConfig, utterances, pcfg: PretextConfig,
                        dcfg: DistillConfig, seed, step: int = 0,
                        ) -> tuple[T.Tensor, DistillStepReport]:
    """Batch loss: mean distillation term + alpha * mean pretext term.

    ``utterances`` is a sequence of objects with a (T, d) ``frames`` array.
    Masks and negative draws derive deterministically from (seed, step, j).
    The same mask is applied to both forward passes unless the config says
    the teacher sees clean input.
    """
    _require_same_names(student, teacher)
    mse_terms = []
    pre_terms = []
    for j, utt in enumerate(utterances):
        frames = utt.frames if hasattr(utt, "frames") else np.asarray(utt)
        mask = sample_mask(frames.shape[0], pcfg, seed=[seed, 1, step, j])
        out_s = forward(student, config, frames, mask.indices)
        with T.no_grad():
            t_mask = mask.indices if dcfg.teacher_input == "masked" else None
            out_t = forward(teacher, config, frames, t_mask)
        mse_terms.append(_distill_term(out_s.reps, out_t.reps, dcfg))
        rng = np.random.default_rng([seed, 2, step, j])
        pre_terms.append(pretext_loss(pretext_predictions(student, out_s),
                                      out_s.latents, mask, pcfg, rng))
    mse_mean = _mean(mse_terms)
    pre_mean = _mean(pre_terms)
    total = T.add(mse_mean, T.scalar_mul(pre_mean, dcfg.alpha))
    report = DistillStepReport(step=step, mse=mse_mean.item(),
                               pretext=pre_mean.item(), total=total.item())
    return total, report


def distill_step(student, teacher, config, utterances, pcfg, dcfg, opt_state,
                 hyper, seed, step: int) -> DistillStepReport:
    """One Adam update of the student; the teacher is never touched."""
    from .optim import adam_update  # local import keeps module layering flat

    total, report = stable_distill_loss(student, teacher, config, utterances,
                                        pcfg, dcfg, seed, step)
    if not np.isfinite(total.item()):
        raise DivergenceError(f"non-finite distillation loss at step {step}: "
                              f"mse={report.mse} pretext={report.pretext}")
    T.backward(total)
    report.grad_norm = adam_update(student, opt_state, hyper)
    return report


def _mean(terms):
    if len(terms) == 1:
        return terms[0]
    acc = terms[0]
    for t in terms[1:]:
        acc = T.add(acc, t)
    return T.scalar_mul(acc, 1.0 / len(terms))


def _require_same_names(student, teacher):
    s_names = [k for k in student if not k.startswith("ctc_head")]
    t_names = [k for k in teacher if not k.startswith("ctc_head")]
    if s_names != t_names:
        raise ConfigMismatchError("student and teacher parameter sets differ")
    for k in s_names:
        if student[k].data.shape != teacher[k].data.shape:
            raise ConfigMismatchError(f"student/teacher shape mismatch for {k}")
