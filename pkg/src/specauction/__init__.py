"""Truthful spectrum auctions on edge-weighted conflict graphs."""

from specauction.errors import (
    DecompositionError,
    DomainError,
    ModeError,
    OptimizationError,
    ParameterError,
    RoundingFailure,
    SimulationError,
    SizeError,
    SolverError,
)
from specauction.graph import ConflictGraph, Ordering
from specauction.instance import Instance
from specauction.valuations import (
    Coverage,
    MrsValuation,
    Partition,
    SymmetricValuation,
    Uniform,
)

__version__ = "0.1.0"

__all__ = [
    "ConflictGraph",
    "Coverage",
    "DecompositionError",
    "DomainError",
    "Instance",
    "ModeError",
    "MrsValuation",
    "OptimizationError",
    "Ordering",
    "ParameterError",
    "Partition",
    "RoundingFailure",
    "SimulationError",
    "SizeError",
    "SolverError",
    "SymmetricValuation",
    "Uniform",
    "__version__",
]
