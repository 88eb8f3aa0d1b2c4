"""Command-line pipeline frontend.

Subcommands
-----------
build-model       meshes, base lead field, skull-sample lead fields
precompute-stats  per-location approximation error statistics
simulate          one noisy test measurement from the fine mesh
scan              single-dipole scan of a measurement file
reproduce-fig2    two-conductivity, three-depth trial ensembles

Progress and logging go to standard error; results go to files under
the output directory, and every command writes the resolved
configuration next to its outputs.  Exit codes: 0 success, 2 invalid
input or configuration, 3 numerical failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from .baestats import (
    SEED_NOISE,
    SEED_SIGMA,
    build_stats_library,
    load_stats_library,
    sample_conductivities,
    save_stats_library,
)
from .config import (
    PipelineConfig,
    default_config,
    dumps_config,
    load_config,
    resolved_mapping,
)
from .errors import (
    BaescanError,
    ConfigurationError,
    FileFormatError,
    NumericalError,
    ValidationError,
)
from .fem import (
    Dipole,
    LeadField,
    build_lead_field,
    build_skull_sample_lead_fields,
    lead_field_fingerprint,
    load_lead_field,
    load_sample_lead_fields,
    save_lead_field,
    save_sample_lead_fields,
)
from .headmesh import (
    build_head_mesh,
    build_source_space,
    load_mesh,
    place_electrodes,
    save_mesh,
)
from .scan import BaeScanOperator, average_reference_noise, standard_scan
from .simharness import (
    ExperimentConfig,
    euclidean_distance,
    forward_map,
    noise_level_for_snr,
    preset_positions,
    render_case_figure,
    run_experiment,
    simulate_measurements,
    write_report_csv,
)

__all__ = [
    "main",
    "cmd_build_model",
    "cmd_precompute_stats",
    "cmd_simulate",
    "cmd_scan",
    "cmd_reproduce_fig2",
]

log = logging.getLogger("baescan.cli")

_EXIT_OK = 0
_EXIT_VALIDATION = 2
_EXIT_NUMERICAL = 3
_EXIT_IO = 4

_NOISELESS_FLOOR = 1e-8
_MEASUREMENT_HEADER = "measurement v1"
_RESULT_HEADER = "scan result v1"


def _setup_logging() -> None:
    root = logging.getLogger("baescan")
    if not root.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
        root.addHandler(handler)
        root.setLevel(logging.INFO)


@dataclasses.dataclass(frozen=True)
class _Paths:
    out: Path
    forward_mesh: Path
    inverse_mesh: Path
    lead_field: Path
    samples: Path
    stats: Path


def _paths(config: PipelineConfig) -> _Paths:
    out = Path(config.out_dir)
    return _Paths(
        out=out,
        forward_mesh=out / config.forward_mesh_file,
        inverse_mesh=out / config.inverse_mesh_file,
        lead_field=out / config.lead_field_file,
        samples=out / config.samples_file,
        stats=out / config.stats_file,
    )


def _write_resolved_config(config: PipelineConfig) -> None:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(dumps_config(config))


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise FileNotFoundError("%s is missing; %s" % (path, hint))
    return path


def _refuse_overwrite(paths, force: bool) -> None:
    existing = [str(p) for p in paths if p.exists()]
    if existing and not force:
        raise FileExistsError(
            "output already exists (%s); pass --force to overwrite"
            % ", ".join(existing)
        )


def _load_inverse_model(config: PipelineConfig):
    """Inverse mesh, source positions, electrodes, and base lead field."""
    p = _paths(config)
    mesh = load_mesh(_require(p.inverse_mesh, "run build-model first"))
    base = load_lead_field(_require(p.lead_field, "run build-model first"))
    source_index = build_source_space(mesh, config.geometry())
    positions = mesh.nodes[source_index]
    if base.n_electrodes != config.n_electrodes:
        raise ConfigurationError(
            "lead field has %d electrodes but config expects %d; "
            "rebuild the model artifacts" % (base.n_electrodes, config.n_electrodes)
        )
    if base.n_sources != positions.shape[0]:
        raise ConfigurationError(
            "lead field covers %d sources but the mesh source band has %d; "
            "rebuild the model artifacts" % (base.n_sources, positions.shape[0])
        )
    return mesh, positions, base


def cmd_build_model(config: PipelineConfig, *, force: bool = False) -> None:
    """Write meshes, the base lead field, and the sample lead fields."""
    p = _paths(config)
    _refuse_overwrite(
        [p.forward_mesh, p.inverse_mesh, p.lead_field, p.samples], force
    )
    p.out.mkdir(parents=True, exist_ok=True)
    geometry = config.geometry()

    t0 = time.perf_counter()
    forward_mesh = build_head_mesh(geometry, config.forward_mesh_nodes)
    inverse_mesh = build_head_mesh(geometry, config.inverse_mesh_nodes)
    log.info(
        "meshes: forward %d nodes, inverse %d nodes",
        forward_mesh.n_nodes,
        inverse_mesh.n_nodes,
    )
    electrodes = place_electrodes(inverse_mesh, config.n_electrodes)
    source_index = build_source_space(inverse_mesh, geometry)
    positions = inverse_mesh.nodes[source_index]
    base = build_lead_field(
        inverse_mesh, config.base_conductivity(), positions, electrodes
    )
    log.info(
        "base lead field: %d electrodes x %d sources",
        base.n_electrodes,
        base.n_sources,
    )
    sigmas = sample_conductivities(
        config.conductivity_prior(),
        config.n_sample_models,
        [config.master_seed, SEED_SIGMA],
    )
    samples = build_skull_sample_lead_fields(
        inverse_mesh, sigmas, config.base_conductivity(), positions, electrodes
    )
    log.info(
        "sample lead fields: %d skull conductivity draws (%.1f s total)",
        len(samples),
        time.perf_counter() - t0,
    )

    save_mesh(forward_mesh, p.forward_mesh)
    save_mesh(inverse_mesh, p.inverse_mesh)
    save_lead_field(base, p.lead_field)
    save_sample_lead_fields(samples, sigmas, base, p.samples)
    _write_resolved_config(config)
    log.info("model artifacts written to %s", p.out)


def cmd_precompute_stats(
    config: PipelineConfig,
    *,
    force: bool = False,
    threads: int = 1,
    threshold: float | None = None,
) -> None:
    """Build and save the per-location statistics library."""
    p = _paths(config)
    _refuse_overwrite([p.stats], force)
    _, positions, base = _load_inverse_model(config)
    samples, sigmas, fingerprint = load_sample_lead_fields(
        _require(p.samples, "run build-model first")
    )
    if fingerprint != lead_field_fingerprint(base):
        raise ConfigurationError(
            "sample lead fields were built against a different base lead "
            "field; rerun build-model"
        )
    energy = config.energy_threshold if threshold is None else float(threshold)
    t0 = time.perf_counter()
    library = build_stats_library(
        base,
        samples,
        sigmas,
        positions,
        config.conductivity_prior(),
        config.amplitude_prior(),
        amplitudes_per_model=config.amplitudes_per_model,
        energy_threshold=energy,
        master_seed=config.master_seed,
        models_per_location=config.models_per_location,
        threads=threads,
    )
    orders = np.array([s.p for s in library.locations])
    log.info(
        "statistics: %d locations in %.1f s; truncation order p in [%d, %d], "
        "%.0f%% with p <= 2",
        len(library.locations),
        time.perf_counter() - t0,
        orders.min(),
        orders.max(),
        100.0 * float(np.mean(orders <= 2)),
    )
    save_stats_library(library, p.stats)
    _write_resolved_config(config)
    log.info("statistics library written to %s", p.stats)


def _case_position(config: PipelineConfig, depth: int) -> np.ndarray:
    _, positions, _ = _load_inverse_model(config)
    presets = preset_positions(positions)
    if not (0 <= depth < presets.shape[0]):
        raise ValidationError("depth preset must be in [0, %d]" % (presets.shape[0] - 1))
    return presets[depth]


def cmd_simulate(
    config: PipelineConfig,
    *,
    sigma_true: float,
    depth: int = 0,
    data_file: str | None = None,
) -> Path:
    """Simulate one noisy measurement and write it as commented text."""
    if not (sigma_true > 0.0 and math.isfinite(sigma_true)):
        raise ValidationError("sigma_true must be positive and finite")
    p = _paths(config)
    position = _case_position(config, depth)
    forward_mesh = load_mesh(_require(p.forward_mesh, "run build-model first"))
    electrodes = place_electrodes(forward_mesh, config.n_electrodes)
    cond = dataclasses.replace(config.base_conductivity(), skull=sigma_true)
    accurate = build_lead_field(forward_mesh, cond, position[None, :], electrodes)
    direction = position / np.linalg.norm(position)
    moment = config.source_amplitude * direction
    dipole = Dipole(location_index=0, moment=moment)
    seed = [config.master_seed, SEED_NOISE, depth, 0]
    v = simulate_measurements(accurate, dipole, config.snr_db, seed)
    v0 = forward_map(accurate, dipole)
    if math.isinf(config.snr_db):
        level = float(np.linalg.norm(v0) / np.sqrt(v0.size)) * _NOISELESS_FLOOR
    else:
        level = noise_level_for_snr(v0, config.snr_db)

    path = Path(data_file) if data_file else p.out / "measurement.txt"
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        "# %s" % _MEASUREMENT_HEADER,
        "# noise_level %.17g" % level,
        "# snr_db %.17g" % config.snr_db,
        "# sigma_true %.17g" % sigma_true,
        "# true_x %.17g" % position[0],
        "# true_y %.17g" % position[1],
        "# amplitude %.17g" % config.source_amplitude,
        "# seed %d %d" % (config.master_seed, depth),
        "# config %s" % json.dumps(resolved_mapping(config)),
    ]
    lines.extend("%.17g" % value for value in v)
    path.write_text("\n".join(lines) + "\n")
    _write_resolved_config(config)
    log.info(
        "measurement written to %s (sigma_true=%g, depth %d, noise level %.3g)",
        path,
        sigma_true,
        depth,
        level,
    )
    return path


def _read_measurement(path: Path):
    """Values plus header fields of a simulate output file."""
    text = Path(path).read_text()
    header: dict[str, list[str]] = {}
    values = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            tokens = line[1:].split()
            if tokens:
                header[tokens[0]] = tokens[1:]
            continue
        try:
            values.append(float(line))
        except ValueError:
            raise FileFormatError(
                "%s:%d: expected one number per line, got %r" % (path, lineno, line)
            )
    if "noise_level" not in header or not header["noise_level"]:
        raise FileFormatError("%s: missing '# noise_level' header" % path)
    level = float(header["noise_level"][0])
    if not (level > 0.0 and math.isfinite(level)):
        raise FileFormatError("%s: noise_level must be positive and finite" % path)
    true_position = None
    if header.get("true_x") and header.get("true_y"):
        true_position = np.array(
            [float(header["true_x"][0]), float(header["true_y"][0])]
        )
    return np.asarray(values, dtype=float), level, true_position


def cmd_scan(
    data_file,
    config: PipelineConfig,
    method: str = "bae",
    *,
    result_file: str | None = None,
) -> Path:
    """Scan one measurement file and write the winning dipole record."""
    if method not in ("standard", "bae"):
        raise ValidationError("method must be 'standard' or 'bae'")
    p = _paths(config)
    v, level, true_position = _read_measurement(Path(data_file))
    _, positions, base = _load_inverse_model(config)
    if v.size != base.n_electrodes:
        raise ValidationError(
            "measurement has %d channels but the lead field has %d electrodes"
            % (v.size, base.n_electrodes)
        )
    noise = average_reference_noise(base.n_electrodes, level)
    if method == "standard":
        result = standard_scan(base, v, noise)
    else:
        library = load_stats_library(
            _require(p.stats, "run precompute-stats first")
        )
        result = BaeScanOperator(base, library, noise).scan(v)

    winner = result.winner
    estimate = positions[winner]
    lines = [
        "# %s" % _RESULT_HEADER,
        "# method %s" % method,
        "# data %s" % data_file,
        "# config %s" % json.dumps(resolved_mapping(config)),
        "winner_index %d" % winner,
        "winner_x %.17g" % estimate[0],
        "winner_y %.17g" % estimate[1],
        "moment_x %.17g" % result.dipole[0],
        "moment_y %.17g" % result.dipole[1],
        "functional %.17g" % result.functional_values[winner],
    ]
    if result.sigma_estimate is not None:
        lines.append("sigma_estimate %.17g" % result.sigma_estimate)
    if true_position is not None:
        ed = euclidean_distance(true_position, estimate)
        lines.append("ed_mm %.17g" % ed)
        log.info("scan (%s): winner %d, ED %.2f mm", method, winner, ed)
    else:
        log.info("scan (%s): winner %d", method, winner)

    path = Path(result_file) if result_file else p.out / ("scan_%s.txt" % method)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


def _pooled_summary(sigma_true: float, reports) -> dict:
    records = [r for rep in reports for r in rep.records if not r.failed]
    if not records:
        return {"sigma_true": sigma_true, "trials": 0}
    ed_std = np.array([r.standard_ed_mm for r in records])
    ed_bae = np.array([r.bae_ed_mm for r in records])
    sig = np.array([r.sigma_estimate for r in records])
    prior_mean = reports[0].prior_mean_sigma
    return {
        "sigma_true": sigma_true,
        "trials": len(records),
        "mean_ed_standard_mm": float(ed_std.mean()),
        "mean_ed_bae_mm": float(ed_bae.mean()),
        "win_rate": float(np.mean(ed_bae <= ed_std)),
        "strict_win_rate": float(np.mean(ed_bae < ed_std)),
        "sigma_improved_rate": float(
            np.mean(np.abs(sig - sigma_true) < abs(prior_mean - sigma_true))
        ),
        "median_sigma_estimate": float(np.median(sig)),
    }


def cmd_reproduce_fig2(
    config: PipelineConfig, *, force: bool = False, threads: int = 1
) -> dict:
    """Run the bundled test-case ensembles and write CSV, SVGs, summary."""
    p = _paths(config)
    model_files = [p.forward_mesh, p.inverse_mesh, p.lead_field, p.samples]
    if force or not all(f.exists() for f in model_files):
        log.info("building model artifacts")
        cmd_build_model(config, force=True)
    if force or not p.stats.exists():
        log.info("precomputing statistics")
        cmd_precompute_stats(config, force=True, threads=threads)

    _, positions, base = _load_inverse_model(config)
    forward_mesh = load_mesh(p.forward_mesh)
    library = load_stats_library(p.stats)
    presets = preset_positions(positions)

    reports = []
    for si, sigma_true in enumerate(config.test_conductivities):
        for depth in range(presets.shape[0]):
            case = si * presets.shape[0] + depth
            experiment = ExperimentConfig(
                true_skull_conductivity=sigma_true,
                source_position=presets[depth],
                amplitude=config.source_amplitude,
                snr_db=config.snr_db,
                trials=config.trials_per_case,
                master_seed=config.master_seed,
                simulation_mesh=forward_mesh,
                standard_model=base,
                source_positions=positions,
                base_conductivity=config.base_conductivity(),
                case_index=case,
                label="sigma=%g depth=%d" % (sigma_true, depth),
            )
            report = run_experiment(experiment, library)
            log.info(
                "case %d (%s): mean ED %.2f mm standard, %.2f mm augmented",
                case,
                experiment.label,
                report.mean_ed_standard_mm,
                report.mean_ed_bae_mm,
            )
            reports.append(report)

    p.out.mkdir(parents=True, exist_ok=True)
    csv_path = p.out / "fig2_trials.csv"
    write_report_csv(reports, csv_path)
    geometry = config.geometry()
    for report in reports:
        render_case_figure(
            report, geometry, p.out / ("fig2_case%d.svg" % report.config.case_index)
        )

    summary = {
        "snr_definition": "noise std = rms(clean signal) / 10^(snr_db / 20)",
        "master_seed": config.master_seed,
        "cases": [
            {
                "case": rep.config.case_index,
                "label": rep.config.label,
                "sigma_true": rep.config.true_skull_conductivity,
                "true_x": float(rep.config.source_position[0]),
                "true_y": float(rep.config.source_position[1]),
                "trials": rep.config.trials,
                "n_failed": rep.n_failed,
                "mean_ed_standard_mm": rep.mean_ed_standard_mm,
                "mean_ed_bae_mm": rep.mean_ed_bae_mm,
                "median_ed_standard_mm": rep.median_ed_standard_mm,
                "median_ed_bae_mm": rep.median_ed_bae_mm,
                "win_rate": rep.win_rate,
                "strict_win_rate": rep.strict_win_rate,
                "sigma_improved_rate": rep.sigma_improved_rate,
                "median_sigma_estimate": rep.median_sigma_estimate,
            }
            for rep in reports
        ],
        "by_conductivity": [
            _pooled_summary(
                sigma_true,
                [
                    rep
                    for rep in reports
                    if rep.config.true_skull_conductivity == sigma_true
                ],
            )
            for sigma_true in config.test_conductivities
        ],
        "config": resolved_mapping(config),
    }
    summary_path = p.out / "fig2_summary.json"
    summary_path.write_text(json.dumps(summary, indent=2) + "\n")
    _write_resolved_config(config)
    log.info("report written: %s, %s, %d figures", csv_path, summary_path, len(reports))
    return summary


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="PATH", help="JSON config file")
    parser.add_argument(
        "--seed", type=int, metavar="N", help="override the master seed"
    )
    parser.add_argument("--out", metavar="DIR", help="override the output directory")
    parser.add_argument(
        "--threads",
        type=int,
        metavar="N",
        default=max(1, os.cpu_count() or 1),
        help="worker threads for the statistics build (default: all cores)",
    )


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="baescan",
        description="Dipole scanning with premarginalized skull conductivity error",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_build = sub.add_parser("build-model", help="write meshes and lead fields")
    _add_common(p_build)
    p_build.add_argument("--force", action="store_true", help="overwrite outputs")

    p_stats = sub.add_parser("precompute-stats", help="write the statistics library")
    _add_common(p_stats)
    p_stats.add_argument("--force", action="store_true", help="overwrite outputs")
    p_stats.add_argument(
        "--threshold",
        type=float,
        metavar="X",
        help="override the eigenvalue energy threshold",
    )

    p_sim = sub.add_parser("simulate", help="write one noisy measurement file")
    _add_common(p_sim)
    p_sim.add_argument(
        "--sigma", type=float, metavar="S", help="true skull conductivity (S/m)"
    )
    p_sim.add_argument(
        "--depth",
        type=int,
        default=0,
        metavar="K",
        help="test-source depth preset 0 (shallow) to 2 (deep)",
    )
    p_sim.add_argument("--data", metavar="PATH", help="measurement output file")

    p_scan = sub.add_parser("scan", help="scan a measurement file")
    _add_common(p_scan)
    p_scan.add_argument("--data", required=True, metavar="PATH", help="measurement file")
    p_scan.add_argument(
        "--method",
        choices=("standard", "bae"),
        default="bae",
        help="scan flavor (default: bae)",
    )
    p_scan.add_argument("--result", metavar="PATH", help="result output file")

    p_fig = sub.add_parser(
        "reproduce-fig2", help="run the bundled test-case ensembles"
    )
    _add_common(p_fig)
    p_fig.add_argument(
        "--force", action="store_true", help="rebuild all artifacts first"
    )
    return parser


def _resolve_config(args) -> PipelineConfig:
    config = load_config(args.config) if args.config else default_config()
    overrides = {}
    if args.seed is not None:
        if args.seed < 0:
            raise ValidationError("--seed must be non-negative")
        overrides["master_seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if overrides:
        config = dataclasses.replace(config, **overrides)
    if args.threads < 1:
        raise ValidationError("--threads must be at least 1")
    return config


def main(argv=None) -> int:
    _setup_logging()
    args = _parser().parse_args(argv)
    try:
        config = _resolve_config(args)
        if args.command == "build-model":
            cmd_build_model(config, force=args.force)
        elif args.command == "precompute-stats":
            cmd_precompute_stats(
                config,
                force=args.force,
                threads=args.threads,
                threshold=args.threshold,
            )
        elif args.command == "simulate":
            sigma = args.sigma
            if sigma is None:
                sigma = config.test_conductivities[0]
            cmd_simulate(config, sigma_true=sigma, depth=args.depth, data_file=args.data)
        elif args.command == "scan":
            cmd_scan(args.data, config, args.method, result_file=args.result)
        elif args.command == "reproduce-fig2":
            cmd_reproduce_fig2(config, force=args.force, threads=args.threads)
        else:
            raise AssertionError("unhandled command %s" % args.command)
    except (FileFormatError, OSError) as exc:
        log.error("%s", exc)
        return _EXIT_IO
    except ValidationError as exc:
        log.error("%s", exc)
        return _EXIT_VALIDATION
    except NumericalError as exc:
        log.error("%s", exc)
        return _EXIT_NUMERICAL
    except BaescanError as exc:
        log.error("%s", exc)
        return _EXIT_VALIDATION
    return _EXIT_OK
