"""Exception hierarchy shared across the package."""


class AdaclabError(Exception):
    """Base class for all package errors."""


class ContractError(AdaclabError, ValueError):
    """Raised when an operation's preconditions (shapes, ranges) are violated."""


class StabilityError(AdaclabError):
    """Raised when a system fails the (1, rho) stability certificate."""

    def __init__(self, message, k=None, norm=None):
        super().__init__(message)
        self.k = k
        self.norm = norm


class SingularRepresentationError(AdaclabError):
    """Raised when a stacked Hankel matrix is not of full row rank."""


class PersistencyError(AdaclabError):
    """Raised when no persistently exciting probe could be drawn."""


class ConfigError(AdaclabError):
    """Raised for invalid experiment configurations.

    ``assumption`` names the violated modelling assumption, if any.
    """

    def __init__(self, message, assumption=None):
        super().__init__(message)
        self.assumption = assumption


class DivergenceError(AdaclabError):
    """Raised when a closed-loop run produces non-finite or runaway signals."""
