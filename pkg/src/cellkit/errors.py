"""Shared exception types."""


class CellkitError(Exception):
    """Base class for all package errors."""


class DomainError(CellkitError):
    """A physical quantity left its admissible range (negative concentration,
    reaction overpotential beyond the overflow guard, OCP argument outside the
    curve's domain)."""


class OcpRangeError(DomainError):
    """Open-circuit potential evaluated outside the curve's stoichiometry range."""


class NonConvergence(CellkitError):
    """Newton iteration failed to meet its tolerance within the iteration budget."""

    def __init__(self, message, iterations=None, residual_norm=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual_norm = residual_norm


class SingularMatrixError(CellkitError):
    """Direct factorization of a system matrix failed."""


class StepSizeUnderflow(CellkitError):
    """Adaptive step control drove the step size below its minimum."""


class MaxWrIterations(CellkitError):
    """Waveform-relaxation fixed point did not converge within the sweep budget."""


class ZeroReference(CellkitError):
    """Relative error requested against a reference with zero norm."""


class ConfigError(CellkitError):
    """Config file could not be parsed or validated; carries all violations."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class IllConditionedWarning(UserWarning):
    """Emitted when a factored system matrix has an estimated condition number
    above the monitoring threshold."""
