"""Topology and line parameter estimation for radial distribution feeders."""

from .errors import (
    ConfigError,
    ConvergenceError,
    DegenerateProbingError,
    EnumerationCapError,
    GridTopoError,
    InsufficientDataError,
    NumericalError,
    RankDeficiencyError,
    ReconstructionError,
    StructuralError,
)
from .grid import Feeder, Line, LineLibrary, build_incidence, build_topology_matrices, seven_bus_feeder, random_feeder
from .graphs import TopologyEstimate
from .simulate import (
    CovarianceBundle,
    InjectionModel,
    MeasurementSet,
    analytic_covariances,
    generate_probing_sequence,
    sample_covariances,
    sample_injections,
    simulate_phasors,
    simulate_voltages_linear,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ConvergenceError",
    "CovarianceBundle",
    "DegenerateProbingError",
    "EnumerationCapError",
    "Feeder",
    "GridTopoError",
    "InjectionModel",
    "InsufficientDataError",
    "Line",
    "LineLibrary",
    "MeasurementSet",
    "NumericalError",
    "RankDeficiencyError",
    "ReconstructionError",
    "StructuralError",
    "TopologyEstimate",
    "analytic_covariances",
    "build_incidence",
    "build_topology_matrices",
    "seven_bus_feeder",
    "generate_probing_sequence",
    "random_feeder",
    "sample_covariances",
    "sample_injections",
    "simulate_phasors",
    "simulate_voltages_linear",
]
