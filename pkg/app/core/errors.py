"""Error vocabulary shared by the signal, model, training and CLI layers."""

from typing import Optional


class FormantDiffError(Exception):
    """Base class for every error raised on purpose by this package."""


class InvalidInputError(FormantDiffError, ValueError):
    """Input violates a documented precondition (empty, out of range, unknown id)."""


class ShapeMismatchError(FormantDiffError, ValueError):
    """Two arrays that must agree in shape or length do not."""


class InfeasibleAlignmentError(FormantDiffError, ValueError):
    """No monotonic complete alignment exists (fewer frames than phonemes)."""


class DomainError(FormantDiffError, ValueError):
    """A time, step or schedule argument is outside its valid domain."""


class DegenerateDensityError(FormantDiffError, ArithmeticError):
    """The marginal variance is zero, so the log-density has no gradient."""


class CheckpointError(FormantDiffError):
    """A checkpoint file is missing, unreadable or of an unknown version."""


class TrainingDivergenceError(FormantDiffError, ArithmeticError):
    """A loss term became non-finite; the offending step is kept."""

    def __init__(self, step: int, term: Optional[str] = None):
        self.step = step
        self.term = term
        where = f" in '{term}'" if term else ""
        super().__init__(f"Training diverged at step {step}: non-finite loss{where}.")
