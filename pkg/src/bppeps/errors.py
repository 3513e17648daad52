"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class BppepsError(Exception):
    exit_code = 1


class InfeasibleError(BppepsError, ValueError):
    """Invalid configuration, e.g. a physical dimension too small for injectivity."""

    exit_code = 2


class ConvergenceError(BppepsError):
    exit_code = 3


class StabilityError(BppepsError):
    """A perturbation is too strong for the injectivity stability guard."""

    exit_code = 4


class OracleBudgetError(BppepsError):
    """Exact contraction would exceed the multiplication budget."""

    exit_code = 5


class IllConditionedError(BppepsError):
    """BP normalization data is not positive (injectivity too weak)."""

    exit_code = 3


class SmallEstimateError(BppepsError):
    """BP estimate of an observable is too close to zero for a ratio expansion."""

    exit_code = 2


class NoCertificateError(BppepsError):
    """The achieved loop decay rate does not exceed the convergence threshold."""

    exit_code = 1
