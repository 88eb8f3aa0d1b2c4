"""EEG-style single-dipole scanning on 2D disk head models.

The package builds finite-element lead fields for concentric-disk head
models, premarginalizes the modeling error caused by an unknown skull
conductivity into low-rank error statistics, and runs dipole scans that
localize a source while estimating the skull conductivity along the way.

Modules: headmesh (geometry and meshing), fem (forward model and lead
fields), analytic (series oracle for the layered disk), baestats (error
sampling and truncated statistics), scan (standard and augmented dipole
scans), simharness (trial ensembles and reports), config and cli (the
file-level pipeline).
"""

from .baestats import (
    AmplitudePrior,
    ConductivityPrior,
    ErrorStats,
    StatsLibrary,
    build_stats_library,
    load_stats_library,
    sample_conductivities,
    save_stats_library,
)
from .config import PipelineConfig, default_config, load_config
from .errors import (
    BaescanError,
    ConfigurationError,
    DegenerateSignalError,
    DegenerateStatisticsError,
    FileFormatError,
    NumericalError,
    ResolutionError,
    SingularSystemError,
    ValidationError,
)
from .fem import (
    ConductivityAssignment,
    Dipole,
    LeadField,
    build_lead_field,
    build_skull_sample_lead_fields,
    forward_map,
    load_lead_field,
    save_lead_field,
)
from .headmesh import (
    DiskGeometry,
    HeadMesh,
    build_head_mesh,
    build_source_space,
    load_mesh,
    place_electrodes,
    save_mesh,
)
from .scan import (
    BaeScanOperator,
    NoiseModel,
    ScanResult,
    StandardScanOperator,
    average_reference_noise,
    bae_scan,
    estimate_conductivity,
    standard_scan,
)
from .simharness import (
    ExperimentConfig,
    ExperimentReport,
    euclidean_distance,
    run_experiment,
    simulate_measurements,
)

__version__ = "0.1.0"

__all__ = [
    "AmplitudePrior",
    "BaeScanOperator",
    "BaescanError",
    "ConductivityAssignment",
    "ConductivityPrior",
    "ConfigurationError",
    "DegenerateSignalError",
    "DegenerateStatisticsError",
    "Dipole",
    "DiskGeometry",
    "ErrorStats",
    "ExperimentConfig",
    "ExperimentReport",
    "FileFormatError",
    "HeadMesh",
    "LeadField",
    "NoiseModel",
    "NumericalError",
    "PipelineConfig",
    "ResolutionError",
    "ScanResult",
    "SingularSystemError",
    "StandardScanOperator",
    "StatsLibrary",
    "ValidationError",
    "average_reference_noise",
    "bae_scan",
    "build_head_mesh",
    "build_lead_field",
    "build_skull_sample_lead_fields",
    "build_source_space",
    "build_stats_library",
    "default_config",
    "estimate_conductivity",
    "euclidean_distance",
    "forward_map",
    "load_config",
    "load_lead_field",
    "load_mesh",
    "load_stats_library",
    "place_electrodes",
    "run_experiment",
    "sample_conductivities",
    "save_lead_field",
    "save_mesh",
    "save_stats_library",
    "simulate_measurements",
    "standard_scan",
]
