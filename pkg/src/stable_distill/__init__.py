"""Distillation-regularized continued pretraining for sequence encoders.

Library + CLI for the four-stage pipeline (pretrain, continued pretraining,
self-distillation, CTC fine-tuning) on a synthetic two-domain benchmark,
plus the evaluation/diagnostic tooling (WER, weight distances, WER-vs-steps
curves) and figure rendering.
"""

__version__ = "0.1.0"
