"""Exception types raised across the package."""


class BalancerError(Exception):
    """Base class for all package errors."""


class InvalidInput(BalancerError, ValueError):
    pass


class SingularCovariance(BalancerError):
    pass


class AcceptanceExhausted(BalancerError):
    """Rerandomization hit its iteration cap without an acceptable draw."""

    def __init__(self, iterations: int, best_m: float, threshold: float):
        self.iterations = iterations
        self.best_m = best_m
        self.threshold = threshold
        super().__init__(
            f"no draw with M < {threshold:.6g} after {iterations} iterations "
            f"(best M = {best_m:.6g})"
        )


class SingularDesign(BalancerError):
    pass


class InsufficientData(BalancerError):
    pass


class NoRoot(BalancerError):
    pass
