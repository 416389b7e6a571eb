"""Exception hierarchy shared across the package.

Every format/contract violation maps to a distinct exception class with a
stable ``code`` string so callers (and the CLI) can dispatch on it without
parsing messages.
"""


class StableDistillError(Exception):
    code = "error"


class ShapeError(StableDistillError):
    """Operand shapes violate an op contract."""

    code = "shape_mismatch"

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


class GradError(StableDistillError):
    code = "grad_error"


class FormatError(StableDistillError):
    """Base for file-format violations (checkpoints, corpora)."""

    code = "bad_format"


class BadMagicError(FormatError):
    code = "bad_magic"


class UnsupportedVersionError(FormatError):
    code = "unsupported_version"


class TruncatedFileError(FormatError):
    code = "truncated"


class ProvenanceError(StableDistillError):
    """A checkpoint's stage tag is not acceptable for the requested stage."""

    code = "provenance"


class ConfigMismatchError(StableDistillError):
    code = "config_mismatch"


class DivergenceError(StableDistillError):
    """Training produced a non-finite or runaway loss."""

    code = "divergence"


class InfeasibleBatchError(StableDistillError):
    code = "infeasible_batch"
