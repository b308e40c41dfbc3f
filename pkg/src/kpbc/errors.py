"""Exception hierarchy shared by every kpbc module."""


class KPBCError(Exception):
    """Base class for all errors raised by kpbc."""


class ContractError(KPBCError, ValueError):
    """An argument violated a documented shape or domain contract."""


class ConfigurationError(ContractError):
    """A controller or integrator configuration is invalid."""


class SingularPointError(KPBCError, ArithmeticError):
    """A derivative was requested where the vector field is not differentiable.

    Attributes
    ----------
    coordinate : int
        Index of the state coordinate responsible for the singularity.
    """

    def __init__(self, message, coordinate=None):
        super().__init__(message)
        self.coordinate = coordinate


class SolverError(KPBCError, RuntimeError):
    """Equilibrium solver did not converge.

    Carries the last iterate so callers can inspect or restart from it.
    """

    def __init__(self, message, x=None, u=None, residual=None):
        super().__init__(message)
        self.x = x
        self.u = u
        self.residual = residual


class SingularityError(SolverError):
    """Jacobian lost rank at a solver iterate."""


class IntegrationError(KPBCError, RuntimeError):
    """Numerical integration failed (non-finite stage or step underflow).

    ``partial`` holds whatever trajectory was produced before the failure,
    or None when nothing was recorded yet.
    """

    def __init__(self, message, t=None, partial=None):
        super().__init__(message)
        self.t = t
        self.partial = partial


class StiffnessError(IntegrationError):
    """Adaptive step size fell below the configured minimum."""


class ScenarioError(ContractError):
    """Scenario file failed validation."""
