"""Exception hierarchy shared by every package under src/.

Each class also derives from the built-in exception it refines, so callers
that already catch ValueError / RuntimeError / PermissionError keep working.
"""


class EasyDistillError(Exception):
    """Root of all errors raised by this toolkit."""


class ConfigError(EasyDistillError, ValueError):
    """Invalid, missing or mistyped configuration (CLI exit code 1)."""


class RecordError(EasyDistillError, ValueError):
    """A dataset row violates its record invariants."""


class ShapeError(EasyDistillError, ValueError):
    """Tensor dimensions do not agree."""


class NonFiniteError(EasyDistillError, ArithmeticError):
    """NaN or Inf reached an op boundary."""


class DegenerateBatchError(EasyDistillError, ValueError):
    """A masked mean was requested over an all-zero mask."""


class ContractError(EasyDistillError, ValueError):
    """An operation was called outside its preconditions."""


class AlignmentError(EasyDistillError, ValueError):
    """Teacher logits and student batches do not line up."""

    def __init__(self, message: str, sample_index: int | None = None):
        super().__init__(message)
        self.sample_index = sample_index


class TeacherError(EasyDistillError, RuntimeError):
    """The teacher returned an unusable response or could not be reached."""


class TeacherAuthError(TeacherError, PermissionError):
    """The teacher endpoint rejected our credentials."""


class CheckpointError(EasyDistillError, OSError):
    """A model checkpoint is missing or corrupt."""


class TrainingError(EasyDistillError, RuntimeError):
    """Training hit an unrecoverable state (non-finite loss, bad reward)."""


class StageError(EasyDistillError, RuntimeError):
    """A pipeline stage failed."""

    def __init__(self, stage: str, message: str, partial_outputs: list[str] | None = None):
        self.stage = stage
        self.partial_outputs = list(partial_outputs or [])
        detail = f"stage '{stage}' failed: {message}"
        if self.partial_outputs:
            detail += f" (partial outputs: {', '.join(self.partial_outputs)})"
        super().__init__(detail)
