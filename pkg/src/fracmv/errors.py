"""Exception types shared across the package.

The CLI maps these onto process exit codes: validation problems exit
with 2, numerical failures (blow-up, non-convergence) with 3, and
verification-suite failures with 4.
"""

from __future__ import annotations


class FracmvError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(FracmvError, ValueError):
    """A parameter, field, or configuration value is out of contract.

    The message always names the offending field or argument.
    """


class InvalidFieldError(ValidationError):
    """A grid function contains NaN or Inf entries."""


class GridMismatchError(ValidationError):
    """Two objects live on different spatial or temporal grids."""


class BlowUpError(FracmvError, ArithmeticError):
    """Time stepping produced a non-finite state.

    Carries the step index and physical time at which the first
    non-finite value appeared.
    """

    def __init__(self, step: int, time: float, message: str | None = None):
        self.step = step
        self.time = time
        super().__init__(
            message
            or f"non-finite state after step {step} (t = {time:.6g}); aborting"
        )


class FixedPointDivergenceError(FracmvError, RuntimeError):
    """Measure-freezing iteration failed to contract within its budget.

    The partial iteration report is attached for post-mortem use.
    """

    def __init__(self, message: str, report=None):
        self.report = report
        super().__init__(message)
