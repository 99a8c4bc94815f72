"""
Workbench Errors
Exception hierarchy shared by the solvers, the data pipeline, training and the CLI.

Each error that reaches the command line carries the exit code it maps to.
"""

from typing import Any, Optional


class WorkbenchError(Exception):
    """Base class for all workbench errors."""

    exit_code = 1


class ConfigError(WorkbenchError):
    """Invalid configuration, plan name, or parameter range."""

    exit_code = 2


class DatasetFormatError(WorkbenchError):
    """Dataset file is truncated, corrupted, or has the wrong magic/version."""

    exit_code = 3


class CheckpointFormatError(WorkbenchError):
    """Checkpoint file is corrupted or does not match the requested config."""

    exit_code = 3


class NumericAbortError(WorkbenchError):
    """Training produced a non-finite loss or gradient."""

    exit_code = 4

    def __init__(self, message: str, checkpoint: Optional[Any] = None, diagnostics: Optional[dict] = None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.diagnostics = diagnostics or {}


class LayoutError(WorkbenchError):
    """Input channels of a task do not fit the model's channel layout."""

    exit_code = 5


class SymmetryError(WorkbenchError):
    """Spectrum is not Hermitian-symmetric, so it does not describe a real field."""


class DomainError(WorkbenchError):
    """Coefficient outside its mathematical domain (non-SPD tensor, nonpositive K)."""


class SingularSymbolError(WorkbenchError):
    """Fourier symbol vanishes at a nonzero wavenumber."""


class UnsupportedSystemError(WorkbenchError):
    """Operation is not defined for the requested PDE system."""


class SolverError(WorkbenchError):
    """Iterative solver did not converge."""


class CalibrationError(WorkbenchError):
    """Advection-diffusion ratio calibration did not converge."""

    def __init__(self, message: str, best: Optional[Any] = None):
        super().__init__(message)
        self.best = best


class ShapeError(WorkbenchError):
    """Array shapes do not match the declared contract."""


class TapeReusedError(WorkbenchError):
    """A forward tape was consumed by backward more than once."""


class PreconditionError(WorkbenchError):
    """Operation called on data that violates its precondition."""
