"""Exception hierarchy shared across the package."""


class IonDgError(Exception):
    """Base class for all package errors."""


class ConfigurationError(IonDgError):
    """Invalid user-supplied configuration (bad geometry, units, parameters)."""


class MeshError(ConfigurationError):
    """Geometry specification that cannot produce a conforming mesh."""


class NumericalError(IonDgError):
    """Numerical failure at run time (solver breakdown, unphysical state)."""


class SolverError(NumericalError):
    """A linear solver did not converge within its iteration budget."""


class IntegratorError(NumericalError):
    """Adaptive ODE integration failed (step-size underflow)."""
