"""Exception types shared across the package.

Every error that corresponds to a violated structural assumption carries a
machine-readable ``condition`` name and, where meaningful, the numerical
residual that tripped it, so CLI reports can name the exact check that failed.
"""

from __future__ import annotations


class SpdelabError(Exception):
    """Base class for all package errors."""


class AssumptionViolation(SpdelabError):
    """A structural assumption on the operator model does not hold.

    Parameters
    ----------
    condition : str
        Machine-readable name of the failed check (e.g. ``"drive_gram_invertible"``).
    residual : float, optional
        The offending numerical quantity.
    """

    def __init__(self, condition: str, message: str, residual: float | None = None):
        self.condition = condition
        self.residual = residual
        detail = f" (residual={residual:.3e})" if residual is not None else ""
        super().__init__(f"[{condition}] {message}{detail}")


class SingularGramian(SpdelabError):
    """A controllability Gramian is numerically singular."""

    def __init__(self, message: str, cond: float | None = None):
        self.cond = cond
        detail = f" (cond={cond:.3e})" if cond is not None else ""
        super().__init__(message + detail)


class HorizonError(SpdelabError):
    """Invalid time-horizon arguments (e.g. T <= r for a delay coupling)."""


class GridMismatch(SpdelabError):
    """Quadrature nodes or times are not representable on the simulation grid."""


class OffGrid(SpdelabError):
    """A requested time does not lie on the trajectory grid."""


class DimensionMismatch(SpdelabError):
    """Vector or matrix dimensions are inconsistent with the model."""


class NonFinite(SpdelabError):
    """A simulated state left the floating-point range (explosion signal)."""

    def __init__(self, message: str, time: float | None = None):
        self.time = time
        detail = f" at t={time:g}" if time is not None else ""
        super().__init__(message + detail)


class PlanMismatch(SpdelabError):
    """A coupling plan is incompatible with the simulation grid or model."""


class DomainError(SpdelabError):
    """A test functional violates the positivity/boundedness requirements."""


class MassEscape(SpdelabError):
    """Too much Gaussian transition mass falls outside the state-grid box."""

    def __init__(self, message: str, mass: float | None = None):
        self.mass = mass
        detail = f" (mass={mass:.3e})" if mass is not None else ""
        super().__init__(message + detail)


class NoConvergence(SpdelabError):
    """Fixed-point iteration failed to converge within the iteration budget."""

    def __init__(self, message: str, rate: float | None = None):
        self.rate = rate
        detail = f" (contraction-rate estimate={rate:.3f})" if rate is not None else ""
        super().__init__(message + detail)


class ConditionUnsatisfied(SpdelabError):
    """Supplied coefficients fail the sampled growth condition."""


class ConfigError(SpdelabError):
    """Scenario configuration is malformed or inconsistent."""
