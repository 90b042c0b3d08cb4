"""Exception hierarchy shared by all modules."""


class AuctionError(Exception):
    """Base class for library errors."""


class DomainError(AuctionError, ValueError):
    """An argument lies outside the operation's domain."""


class SizeError(AuctionError, ValueError):
    """Input exceeds an exact-enumeration guard."""


class ModeError(AuctionError, ValueError):
    """Operation called on the wrong kind of graph or valuation."""


class ParameterError(AuctionError, ValueError):
    """Algorithm parameters produce invalid probabilities."""


class SolverError(AuctionError, RuntimeError):
    """LP solver failed numerically."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class RoundingFailure(AuctionError, RuntimeError):
    """Randomized allocation exceeded its round cap."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class DecompositionError(AuctionError, RuntimeError):
    """Column generation could not decompose the point within the alpha cap."""

    def __init__(self, message, dual_witness=None):
        super().__init__(message)
        self.dual_witness = dual_witness


class OptimizationError(AuctionError, RuntimeError):
    """Convex maximization did not reach the requested gap."""

    def __init__(self, message, gap=None):
        super().__init__(message)
        self.gap = gap


class SimulationError(AuctionError, RuntimeError):
    """The estimator broke its accuracy contract during dyadic simulation."""
