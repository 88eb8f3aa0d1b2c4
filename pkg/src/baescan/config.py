"""Run configuration shared by all pipeline commands.

A configuration is a flat JSON object; every key has a default, so the
empty object (or no config file at all) reproduces the reference setup:
a three-disk head with 32 electrodes, skull conductivity prior
N(0.0073, 0.0013^2) around the standard value 0.0085, 85% eigenvalue
energy truncation, and 30 dB test cases at true skull conductivities
0.0055 and 0.011.

Unknown keys and out-of-range values raise ConfigurationError naming
the offending field.  Commands embed the resolved configuration in
their outputs so every artifact records how it was produced.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass

from .baestats import AmplitudePrior, ConductivityPrior
from .errors import ConfigurationError
from .fem import ConductivityAssignment
from .headmesh import DiskGeometry

__all__ = [
    "PipelineConfig",
    "default_config",
    "config_from_mapping",
    "load_config",
    "resolved_mapping",
    "dumps_config",
]


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a pipeline run needs, one flat record."""

    # geometry (metres)
    brain_radius: float = 0.079
    skull_radius: float = 0.086
    scalp_radius: float = 0.092
    source_band_inner: float = 0.060
    source_band_outer: float = 0.075
    # conductivities (S/m)
    brain_conductivity: float = 0.33
    scalp_conductivity: float = 0.43
    base_skull_conductivity: float = 0.0085
    # priors
    skull_prior_mean: float = 0.0073
    skull_prior_std: float = 0.0013
    amplitude_mean: float = 1.0
    amplitude_std: float = 0.01
    # discretization
    n_electrodes: int = 32
    forward_mesh_nodes: int = 2518
    inverse_mesh_nodes: int = 1780
    # statistics
    energy_threshold: float = 0.85
    n_sample_models: int = 400
    amplitudes_per_model: int = 1000
    models_per_location: int | None = None
    # test cases
    snr_db: float = 30.0
    test_conductivities: tuple[float, ...] = (0.0055, 0.011)
    trials_per_case: int = 20
    source_amplitude: float = 1.0
    # reproducibility
    master_seed: int = 0
    # artifact locations (file names are relative to out_dir)
    out_dir: str = "artifacts"
    forward_mesh_file: str = "forward_mesh.txt"
    inverse_mesh_file: str = "inverse_mesh.txt"
    lead_field_file: str = "lead_field.bin"
    samples_file: str = "sample_lead_fields.bin"
    stats_file: str = "stats_library.bin"

    def __post_init__(self):
        _validate(self)

    def geometry(self) -> DiskGeometry:
        return DiskGeometry(
            brain_radius=self.brain_radius,
            skull_radius=self.skull_radius,
            scalp_radius=self.scalp_radius,
            source_band=(self.source_band_inner, self.source_band_outer),
        )

    def base_conductivity(self) -> ConductivityAssignment:
        return ConductivityAssignment(
            brain=self.brain_conductivity,
            skull=self.base_skull_conductivity,
            scalp=self.scalp_conductivity,
        )

    def conductivity_prior(self) -> ConductivityPrior:
        return ConductivityPrior(mean=self.skull_prior_mean, std=self.skull_prior_std)

    def amplitude_prior(self) -> AmplitudePrior:
        return AmplitudePrior(mean=self.amplitude_mean, std=self.amplitude_std)


_FIELDS = {f.name: f for f in dataclasses.fields(PipelineConfig)}
_INT_FIELDS = {
    "n_electrodes",
    "forward_mesh_nodes",
    "inverse_mesh_nodes",
    "n_sample_models",
    "amplitudes_per_model",
    "trials_per_case",
    "master_seed",
}
_FLOAT_FIELDS = {
    "brain_radius",
    "skull_radius",
    "scalp_radius",
    "source_band_inner",
    "source_band_outer",
    "brain_conductivity",
    "scalp_conductivity",
    "base_skull_conductivity",
    "skull_prior_mean",
    "skull_prior_std",
    "amplitude_mean",
    "amplitude_std",
    "energy_threshold",
    "snr_db",
    "source_amplitude",
}
_STR_FIELDS = {
    "out_dir",
    "forward_mesh_file",
    "inverse_mesh_file",
    "lead_field_file",
    "samples_file",
    "stats_file",
}


def _bad(field: str, why: str):
    raise ConfigurationError("config field '%s' %s" % (field, why))


def _require_positive(cfg: PipelineConfig, *names: str) -> None:
    for name in names:
        value = getattr(cfg, name)
        if not (value > 0.0) or not math.isfinite(value):
            _bad(name, "must be positive and finite")


def _validate(cfg: PipelineConfig) -> None:
    _require_positive(
        cfg,
        "brain_radius",
        "skull_radius",
        "scalp_radius",
        "source_band_inner",
        "source_band_outer",
        "brain_conductivity",
        "scalp_conductivity",
        "base_skull_conductivity",
        "skull_prior_mean",
        "skull_prior_std",
        "amplitude_std",
        "source_amplitude",
    )
    if not (cfg.brain_radius < cfg.skull_radius < cfg.scalp_radius):
        _bad("brain_radius", "must satisfy brain < skull < scalp radius ordering")
    if not (cfg.source_band_inner < cfg.source_band_outer):
        _bad("source_band_inner", "must be below source_band_outer")
    if cfg.source_band_outer >= cfg.brain_radius:
        _bad("source_band_outer", "must lie strictly inside the brain disk")
    if not math.isfinite(cfg.amplitude_mean):
        _bad("amplitude_mean", "must be finite")
    if cfg.n_electrodes < 2:
        _bad("n_electrodes", "must be at least 2")
    if cfg.forward_mesh_nodes < 16:
        _bad("forward_mesh_nodes", "must be at least 16")
    if cfg.inverse_mesh_nodes < 16:
        _bad("inverse_mesh_nodes", "must be at least 16")
    if not (0.0 < cfg.energy_threshold <= 1.0):
        _bad("energy_threshold", "must be in (0, 1]")
    if cfg.n_sample_models < 2:
        _bad("n_sample_models", "must be at least 2")
    if cfg.amplitudes_per_model < 1:
        _bad("amplitudes_per_model", "must be at least 1")
    if cfg.models_per_location is not None and not (
        2 <= cfg.models_per_location <= cfg.n_sample_models
    ):
        _bad("models_per_location", "must be null or in [2, n_sample_models]")
    if math.isnan(cfg.snr_db):
        _bad("snr_db", "must not be NaN")
    if not cfg.test_conductivities:
        _bad("test_conductivities", "must be a non-empty list")
    for value in cfg.test_conductivities:
        if not (value > 0.0) or not math.isfinite(value):
            _bad("test_conductivities", "entries must be positive and finite")
    if cfg.trials_per_case < 1:
        _bad("trials_per_case", "must be at least 1")
    if cfg.master_seed < 0:
        _bad("master_seed", "must be non-negative")
    for name in _STR_FIELDS:
        if not getattr(cfg, name):
            _bad(name, "must be a non-empty path")


def default_config() -> PipelineConfig:
    return PipelineConfig()


def _coerce(name: str, value):
    if name in _INT_FIELDS:
        if isinstance(value, bool) or not isinstance(value, int):
            _bad(name, "must be an integer")
        return value
    if name in _FLOAT_FIELDS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            _bad(name, "must be a number")
        return float(value)
    if name in _STR_FIELDS:
        if not isinstance(value, str):
            _bad(name, "must be a string")
        return value
    if name == "models_per_location":
        if value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, int):
            _bad(name, "must be null or an integer")
        return value
    if name == "test_conductivities":
        if not isinstance(value, (list, tuple)):
            _bad(name, "must be a list of numbers")
        out = []
        for entry in value:
            if isinstance(entry, bool) or not isinstance(entry, (int, float)):
                _bad(name, "entries must be numbers")
            out.append(float(entry))
        return tuple(out)
    raise AssertionError("unhandled config field %s" % name)


def config_from_mapping(mapping) -> PipelineConfig:
    """Build a config from a plain dict, rejecting unknown keys."""
    if not isinstance(mapping, dict):
        raise ConfigurationError("config root must be a JSON object")
    values = {}
    for key, value in mapping.items():
        if key not in _FIELDS:
            raise ConfigurationError("unknown config field '%s'" % key)
        values[key] = _coerce(key, value)
    return PipelineConfig(**values)


def load_config(path) -> PipelineConfig:
    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigurationError("%s: not valid JSON (%s)" % (path, exc)) from exc
    return config_from_mapping(raw)


def resolved_mapping(config: PipelineConfig) -> dict:
    """JSON-serializable dict of every field, in declaration order."""
    out = {}
    for name in _FIELDS:
        value = getattr(config, name)
        if isinstance(value, tuple):
            value = list(value)
        out[name] = value
    return out


def dumps_config(config: PipelineConfig) -> str:
    return json.dumps(resolved_mapping(config), indent=2) + "\n"
