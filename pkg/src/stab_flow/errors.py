"""
Exception hierarchy for stab_flow. Every error carries the CLI exit code it maps to.
"""

from typing import Any


class StabError(Exception):
    """Base class; numerical failures exit 4, bad inputs 3"""

    exit_code = 4


class ConfigurationError(StabError):
    """A scenario or CLI argument failed validation"""

    exit_code = 3


class DimensionMismatchError(StabError):
    """Two objects that must share a dimension (or particle count) don't"""

    exit_code = 3


class InvalidMapError(StabError):
    """A push-forward map returned something other than a finite d-vector"""

    exit_code = 3


class DegenerateMeasureError(StabError):
    """A measure or plan with no atoms"""

    exit_code = 3


class UnsupportedCLPError(StabError):
    """The built-in control-Lyapunov pair was requested for a target/field it does not cover"""

    exit_code = 3


class BisectionError(StabError):
    """Bisection on a radius could not bracket its root"""


class InfeasibleParametersError(StabError):
    """The parameter selector exhausted its grids"""

    exit_code = 3

    def __init__(self, message: str, last_failed: str):
        super().__init__(message)
        self.last_failed = last_failed


class FieldEvaluationError(StabError):
    """A vector field returned a non-finite value"""


class FlowBlowUpError(StabError):
    """The particle flow left the finite floats"""

    def __init__(self, message: str, last_finite_time: float):
        super().__init__(message)
        self.last_finite_time = last_finite_time


class OutOfRangeError(StabError):
    """A measure lies outside the outermost shell of the global feedback"""

    exit_code = 3


class NonConvergenceError(StabError):
    """The inf-convolution descent hit its iteration cap without Ekeland acceptance"""

    exit_code = 4

    def __init__(self, message: str, best: Any = None):
        super().__init__(message)
        self.best = best


class TrajectoryAbortedError(StabError):
    """A theta-trajectory stopped early; the partial log travels with the error"""

    def __init__(self, message: str, partial_log: Any, cause: StabError):
        super().__init__(message)
        self.partial_log = partial_log
        self.cause = cause
        self.exit_code = cause.exit_code
