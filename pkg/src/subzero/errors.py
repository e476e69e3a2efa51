"""Exception types shared across the package.

Everything raised on purpose derives from :class:`SubzeroError` so callers can
catch library failures without also swallowing programming errors.
"""

from __future__ import annotations


class SubzeroError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SubzeroError, ValueError):
    """A matrix or parameter list has inconsistent or unsupported dimensions."""


class RankDeficient(SubzeroError, ArithmeticError):
    """A QR factorization produced a numerically rank-deficient basis."""


class NonFiniteLoss(SubzeroError, ArithmeticError):
    """A loss evaluation returned NaN or infinity."""


class DegenerateGradient(SubzeroError, ArithmeticError):
    """A diagnostic needed a nonzero gradient but the norm was below tolerance."""


class AllocationRefused(SubzeroError, MemoryError):
    """A dense d-by-q allocation would exceed the configured entry budget."""


class ScaleRefused(SubzeroError, ValueError):
    """A verification routine was asked to materialize something too large."""


class BudgetExceeded(SubzeroError, RuntimeError):
    """A step or evaluation budget ran out before the stopping criterion."""


class ConfigError(SubzeroError, ValueError):
    """An experiment configuration failed validation."""


class StepFailure(SubzeroError, RuntimeError):
    """A training step aborted; carries the step index for context."""

    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step
