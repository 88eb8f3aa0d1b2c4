"""Monte-Carlo approximation-error statistics for the unknown skull.

For each source location i, the discrepancy between the accurate and
the standard forward model is sampled as

    eps = a * (A(sigma) - A_0) r_i

over random skull conductivities sigma (one per sample head model) and
random dipole amplitudes a, with r_i the unit radial moment at the
location.  Per location the module estimates the sample mean and
covariance of eps, truncates the covariance eigendecomposition by an
eigenvalue-energy rule, projects the samples onto the retained
eigenvectors to get alpha samples, and records the cross-covariance
between sigma and alpha that later turns estimated alphas back into a
skull-conductivity estimate.

Sample pairing is exhaustive by default: every head model is combined
with every amplitude draw, sample j = s + S*k for model k and amplitude
s.  A random-subset mode (``models_per_location``) draws a
per-location subset of models instead.

All randomness flows through numpy Generators seeded with
``[master_seed, stream_tag, index]`` so results are independent of
thread count and evaluation order.
"""

from __future__ import annotations

import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateStatisticsError,
    FileFormatError,
    ValidationError,
)
from .fem import LeadField, lead_field_fingerprint

__all__ = [
    "ConductivityPrior",
    "AmplitudePrior",
    "ErrorStats",
    "StatsLibrary",
    "SEED_SIGMA",
    "SEED_AMPLITUDE",
    "SEED_MODEL_SUBSET",
    "SEED_NOISE",
    "sample_conductivities",
    "stack_lead_fields",
    "compute_error_samples",
    "compute_statistics",
    "eigendecompose_truncate",
    "compute_alpha_samples",
    "compute_residual_samples",
    "compute_cross_covariance",
    "build_location_stats",
    "build_stats_library",
    "save_stats_library",
    "load_stats_library",
]

log = logging.getLogger(__name__)

# rng stream tags: generators are seeded [master_seed, tag, index]
SEED_SIGMA = 101
SEED_AMPLITUDE = 202
SEED_MODEL_SUBSET = 303
SEED_NOISE = 404

_STATS_MAGIC = b"BSSTATS1"
_STATS_VERSION = 1
_HEADER_FMT = "<8sIII d ddd dd qqqqq 32s Q"
_HEADER_SIZE = struct.calcsize(_HEADER_FMT)


@dataclass(frozen=True)
class ConductivityPrior:
    """Gaussian skull-conductivity prior, clipped below (S/m)."""

    mean: float = 0.0073
    std: float = 0.0013
    lower_clip: float = 1e-4

    def __post_init__(self):
        if not (self.std > 0.0):
            raise ValidationError("conductivity prior std must be positive")
        if not (self.lower_clip > 0.0):
            raise ValidationError("conductivity lower clip must be positive")


@dataclass(frozen=True)
class AmplitudePrior:
    """Gaussian prior on the dimensionless dipole amplitude scale."""

    mean: float = 1.0
    std: float = 0.01

    def __post_init__(self):
        if not (self.std > 0.0):
            raise ValidationError("amplitude prior std must be positive")


@dataclass
class ErrorStats:
    """Approximation-error statistics of one source location.

    ``eigenvectors`` holds the full orthonormal eigenbasis of the error
    covariance (descending eigenvalues); the leading ``p`` columns are
    the retained directions W, the rest span the residual.  Keeping the
    full basis is what lets the scan rebuild the residual covariance
    sum_{k>p} lambda_k w_k w_k^T.
    """

    eps_mean: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    p: int
    cross_cov: np.ndarray
    n_models: int
    n_amplitudes: int

    @property
    def n_electrodes(self) -> int:
        return self.eps_mean.size

    @property
    def W(self) -> np.ndarray:
        return self.eigenvectors[:, : self.p]

    def residual_covariance(self) -> np.ndarray:
        """Covariance of the truncated-away error component."""
        tail = self.eigenvectors[:, self.p :]
        lam = self.eigenvalues[self.p :]
        return (tail * lam[None, :]) @ tail.T


@dataclass
class StatsLibrary:
    """Per-location error statistics plus the provenance that built them."""

    locations: list[ErrorStats]
    energy_threshold: float
    cond_prior: ConductivityPrior
    amp_prior: AmplitudePrior
    master_seed: int
    models_per_location: int | None
    n_models_total: int
    n_amplitudes: int
    n_clipped: int
    provenance: str  # hex sha-256 of the base lead field serialization

    @property
    def n_locations(self) -> int:
        return len(self.locations)

    @property
    def n_electrodes(self) -> int:
        return self.locations[0].n_electrodes if self.locations else 0


def sample_conductivities(prior: ConductivityPrior, count: int, seed) -> np.ndarray:
    """Draw skull conductivities from the prior, clipped below.

    ``seed`` may be anything ``numpy.random.default_rng`` accepts; the
    library builder passes ``[master_seed, SEED_SIGMA]``.
    """
    count = int(count)
    if count < 1:
        raise ValidationError("need at least one conductivity sample")
    rng = np.random.default_rng(seed)
    draws = rng.normal(prior.mean, prior.std, count)
    return np.maximum(draws, prior.lower_clip)


def stack_lead_fields(sample_lead_fields) -> np.ndarray:
    """Stack per-model lead fields into one (K, m, 2n) array."""
    if isinstance(sample_lead_fields, np.ndarray):
        arr = sample_lead_fields
        if arr.ndim != 3:
            raise ValidationError("stacked lead fields must have shape (K, m, 2n)")
        return arr
    mats = [lf.matrix if isinstance(lf, LeadField) else np.asarray(lf) for lf in sample_lead_fields]
    if not mats:
        raise ValidationError("need at least one sample lead field")
    return np.stack(mats, axis=0)


def compute_error_samples(
    sample_lead_fields,
    base: LeadField,
    location_index: int,
    direction,
    amplitudes,
) -> np.ndarray:
    """Approximation-error samples for one location, exhaustively paired.

    Sample j = s + S*k is amplitude s applied to model k:
    eps_j = a_s * (A_k - A_0) restricted to the location's column pair,
    times the unit moment ``direction``.  Returns shape (K*S, m).
    """
    stacked = stack_lead_fields(sample_lead_fields)
    k_models, m, two_n = stacked.shape
    if base.matrix.shape != (m, two_n):
        raise ValidationError("base lead field shape does not match samples")
    i = int(location_index)
    if not (0 <= i < two_n // 2):
        raise ValidationError("location index %d out of range" % i)
    d = np.asarray(direction, dtype=float).reshape(2)
    amps = np.asarray(amplitudes, dtype=float).reshape(-1)
    if amps.size < 1:
        raise ValidationError("need at least one amplitude sample")
    cols = slice(2 * i, 2 * i + 2)
    # per-model error field u_k = (A_k - A_0) d at this location, (K, m)
    u = (stacked[:, :, cols] - base.matrix[None, :, cols]) @ d
    eps = (amps[None, :, None] * u[:, None, :]).reshape(k_models * amps.size, m)
    return eps


def compute_statistics(samples) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and covariance (1/(J-1) normalization) of (J, m) samples."""
    x = np.asarray(samples, dtype=float)
    if x.ndim != 2:
        raise ValidationError("samples must be a (J, m) array")
    j = x.shape[0]
    if j < 2:
        raise DegenerateStatisticsError("need at least 2 samples for a covariance")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (j - 1)
    cov = 0.5 * (cov + cov.T)
    return mean, cov


def eigendecompose_truncate(
    cov, energy_threshold: float = 0.85
) -> tuple[np.ndarray, np.ndarray, int]:
    """Descending eigendecomposition with energy-rule truncation.

    Returns (eigenvalues, eigenvectors, p) with p the smallest order
    whose leading eigenvalues hold at least ``energy_threshold`` of the
    total eigenvalue sum.  Tiny negative eigenvalues (roundoff of PSD
    sample covariances) are clamped to zero.  Two edge conventions: an
    all-zero covariance makes the energy rule vacuous, p = 1; threshold
    exactly 1.0 means full energy and keeps every mode, p = m (the
    energy rule alone would stop at the numerical rank).
    """
    if not (0.0 < energy_threshold <= 1.0):
        raise ValidationError("energy threshold must be in (0, 1]")
    c = np.asarray(cov, dtype=float)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValidationError("covariance must be a square matrix")
    if not np.all(np.isfinite(c)):
        raise ValidationError("covariance contains non-finite entries")
    scale = np.abs(c).max()
    if scale > 0.0 and np.abs(c - c.T).max() > 1e-10 * scale:
        raise ValidationError("covariance must be symmetric")
    c = 0.5 * (c + c.T)
    w, v = np.linalg.eigh(c)
    w = w[::-1].copy()
    v = v[:, ::-1].copy()
    w[w < 0.0] = 0.0
    if energy_threshold >= 1.0:
        return w, v, w.size
    cum = np.cumsum(w)
    if cum[-1] <= 0.0:
        return w, v, 1
    ratios = cum / cum[-1]
    p = int(np.searchsorted(ratios, energy_threshold, side="left")) + 1
    p = min(p, w.size)
    return w, v, p


def compute_alpha_samples(samples, eps_mean, w) -> np.ndarray:
    """Coefficients of centered samples on the retained eigenvectors, (J, p)."""
    x = np.asarray(samples, dtype=float)
    return (x - np.asarray(eps_mean)[None, :]) @ np.asarray(w)


def compute_residual_samples(samples, eps_mean, eigenvectors, p: int) -> np.ndarray:
    """Projection of centered samples onto the discarded eigenspace, (J, m)."""
    x = np.asarray(samples, dtype=float) - np.asarray(eps_mean)[None, :]
    tail = np.asarray(eigenvectors)[:, int(p) :]
    return (x @ tail) @ tail.T


def compute_cross_covariance(sigmas, alphas) -> np.ndarray:
    """Sample cross-covariance between sigma draws and alpha coefficients."""
    s = np.asarray(sigmas, dtype=float).reshape(-1)
    a = np.asarray(alphas, dtype=float)
    if a.ndim != 2 or a.shape[0] != s.size:
        raise ValidationError("sigma and alpha sample counts must match")
    if s.size < 2:
        raise DegenerateStatisticsError("need at least 2 samples for a cross-covariance")
    sc = s - s.mean()
    ac = a - a.mean(axis=0)
    return sc @ ac / (s.size - 1)


def build_location_stats(
    stacked: np.ndarray,
    base: LeadField,
    location_index: int,
    direction,
    sigma_samples: np.ndarray,
    amplitudes: np.ndarray,
    model_indices: np.ndarray | None,
    energy_threshold: float,
) -> ErrorStats:
    """Full statistics pipeline for one source location."""
    if model_indices is None:
        sub = stacked
        sigmas = sigma_samples
    else:
        sub = stacked[model_indices]
        sigmas = sigma_samples[model_indices]
    eps = compute_error_samples(sub, base, location_index, direction, amplitudes)
    mean, cov = compute_statistics(eps)
    eigvals, eigvecs, p = eigendecompose_truncate(cov, energy_threshold)
    alphas = compute_alpha_samples(eps, mean, eigvecs[:, :p])
    sigma_per_sample = np.repeat(sigmas, amplitudes.size)
    cross = compute_cross_covariance(sigma_per_sample, alphas)
    return ErrorStats(
        eps_mean=mean,
        eigenvalues=eigvals,
        eigenvectors=eigvecs,
        p=p,
        cross_cov=cross,
        n_models=sub.shape[0],
        n_amplitudes=int(amplitudes.size),
    )


def build_stats_library(
    base: LeadField,
    sample_lead_fields,
    sigma_samples,
    source_positions,
    cond_prior: ConductivityPrior,
    amp_prior: AmplitudePrior,
    *,
    amplitudes_per_model: int = 1000,
    energy_threshold: float = 0.85,
    master_seed: int = 0,
    models_per_location: int | None = None,
    threads: int = 1,
) -> StatsLibrary:
    """Compute the per-location statistics library.

    Amplitude draws (and the optional random model subsets) use
    per-location seed substreams, so the result does not depend on
    ``threads`` or on scheduling.
    """
    stacked = stack_lead_fields(sample_lead_fields)
    k_models, m, two_n = stacked.shape
    sigma_samples = np.asarray(sigma_samples, dtype=float).reshape(-1)
    if sigma_samples.size != k_models:
        raise ValidationError("one skull conductivity per sample lead field required")
    positions = np.asarray(source_positions, dtype=float)
    if positions.ndim != 2 or positions.shape != (two_n // 2, 2):
        raise ValidationError("source positions must be an (n, 2) array matching the lead fields")
    radii = np.linalg.norm(positions, axis=1)
    if np.any(radii <= 0.0):
        raise ValidationError("source positions must be away from the origin")
    s_count = int(amplitudes_per_model)
    if s_count < 1:
        raise ValidationError("need at least one amplitude per model")
    if models_per_location is not None:
        models_per_location = int(models_per_location)
        if not (2 <= models_per_location <= k_models):
            raise ValidationError("models_per_location must be in [2, number of models]")
    directions = positions / radii[:, None]
    n_loc = positions.shape[0]

    def one(i: int) -> ErrorStats:
        amps = np.random.default_rng([master_seed, SEED_AMPLITUDE, i]).normal(
            amp_prior.mean, amp_prior.std, s_count
        )
        if models_per_location is None:
            subset = None
        else:
            subset = np.random.default_rng([master_seed, SEED_MODEL_SUBSET, i]).choice(
                k_models, size=models_per_location, replace=False
            )
        return build_location_stats(
            stacked,
            base,
            i,
            directions[i],
            sigma_samples,
            amps,
            subset,
            energy_threshold,
        )

    threads = max(1, int(threads))
    results: list[ErrorStats | None] = [None] * n_loc
    if threads == 1:
        for i in range(n_loc):
            results[i] = one(i)
            if (i + 1) % 100 == 0 or i + 1 == n_loc:
                log.info("statistics: %d/%d locations", i + 1, n_loc)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for i, stats in enumerate(pool.map(one, range(n_loc))):
                results[i] = stats
                if (i + 1) % 100 == 0 or i + 1 == n_loc:
                    log.info("statistics: %d/%d locations", i + 1, n_loc)

    n_clipped = int(np.sum(sigma_samples == cond_prior.lower_clip))
    return StatsLibrary(
        locations=[r for r in results if r is not None],
        energy_threshold=float(energy_threshold),
        cond_prior=cond_prior,
        amp_prior=amp_prior,
        master_seed=int(master_seed),
        models_per_location=models_per_location,
        n_models_total=k_models,
        n_amplitudes=s_count,
        n_clipped=n_clipped,
        provenance=lead_field_fingerprint(base),
    )


def save_stats_library(library: StatsLibrary, path) -> None:
    """Write the statistics library container.

    Byte layout (all little-endian):

    * header (fixed size): magic ``BSSTATS1``; uint32 version, m,
      n_locations; float64 energy threshold; float64 conductivity prior
      mean/std/clip; float64 amplitude prior mean/std; int64 master
      seed, models_per_location (-1 for exhaustive), total model count,
      amplitude count, clip count; 32-byte raw provenance sha-256;
      uint64 offset of the index table.
    * index table at that fixed offset (immediately after the header):
      one uint64 absolute file offset per location record.
    * per-location records: uint32 p, uint32 reserved, int64 models
      used, int64 amplitudes used, then float64 arrays eps_mean[m],
      eigenvalues[m], eigenvectors[m*m] (row-major), cross_cov[p].
    """
    m = library.n_electrodes
    n = library.n_locations
    if n == 0:
        raise ValidationError("refusing to write an empty statistics library")
    header = struct.pack(
        _HEADER_FMT,
        _STATS_MAGIC,
        _STATS_VERSION,
        m,
        n,
        library.energy_threshold,
        library.cond_prior.mean,
        library.cond_prior.std,
        library.cond_prior.lower_clip,
        library.amp_prior.mean,
        library.amp_prior.std,
        library.master_seed,
        -1 if library.models_per_location is None else library.models_per_location,
        library.n_models_total,
        library.n_amplitudes,
        library.n_clipped,
        bytes.fromhex(library.provenance),
        _HEADER_SIZE,
    )
    offsets = np.zeros(n, dtype="<u8")
    records = []
    cursor = _HEADER_SIZE + 8 * n
    for i, st in enumerate(library.locations):
        if st.eps_mean.size != m:
            raise ValidationError("inconsistent electrode count in location %d" % i)
        rec = struct.pack("<IIqq", st.p, 0, st.n_models, st.n_amplitudes)
        rec += np.ascontiguousarray(st.eps_mean, "<f8").tobytes()
        rec += np.ascontiguousarray(st.eigenvalues, "<f8").tobytes()
        rec += np.ascontiguousarray(st.eigenvectors, "<f8").tobytes()
        rec += np.ascontiguousarray(st.cross_cov, "<f8").tobytes()
        offsets[i] = cursor
        cursor += len(rec)
        records.append(rec)
    with open(path, "wb") as f:
        f.write(header)
        f.write(offsets.tobytes())
        for rec in records:
            f.write(rec)


def load_stats_library(path) -> StatsLibrary:
    """Read a statistics library written by :func:`save_stats_library`."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER_SIZE:
        raise FileFormatError("%s: truncated statistics file" % path)
    (
        magic,
        version,
        m,
        n,
        threshold,
        prior_mean,
        prior_std,
        prior_clip,
        amp_mean,
        amp_std,
        master_seed,
        models_per_location,
        n_models_total,
        n_amplitudes,
        n_clipped,
        provenance,
        index_offset,
    ) = struct.unpack(_HEADER_FMT, blob[:_HEADER_SIZE])
    if magic != _STATS_MAGIC:
        raise FileFormatError("%s: bad statistics magic" % path)
    if version != _STATS_VERSION:
        raise FileFormatError("%s: unsupported statistics version %d" % (path, version))
    if index_offset != _HEADER_SIZE:
        raise FileFormatError("%s: index table not at the fixed offset" % path)
    idx_end = _HEADER_SIZE + 8 * n
    if len(blob) < idx_end:
        raise FileFormatError("%s: truncated index table" % path)
    offsets = np.frombuffer(blob[_HEADER_SIZE:idx_end], dtype="<u8")
    locations = []
    fixed = struct.calcsize("<IIqq")
    for i, off in enumerate(offsets):
        off = int(off)
        if off + fixed > len(blob):
            raise FileFormatError("%s: record %d offset out of range" % (path, i))
        p, _, n_models, n_amps = struct.unpack("<IIqq", blob[off : off + fixed])
        need = fixed + 8 * (m + m + m * m + p)
        if off + need > len(blob):
            raise FileFormatError("%s: record %d truncated" % (path, i))
        cur = off + fixed

        def take(count: int) -> np.ndarray:
            nonlocal cur
            out = np.frombuffer(blob[cur : cur + 8 * count], dtype="<f8").copy()
            cur += 8 * count
            return out

        eps_mean = take(m)
        eigenvalues = take(m)
        eigenvectors = take(m * m).reshape(m, m)
        cross = take(p)
        locations.append(
            ErrorStats(
                eps_mean=eps_mean,
                eigenvalues=eigenvalues,
                eigenvectors=eigenvectors,
                p=int(p),
                cross_cov=cross,
                n_models=int(n_models),
                n_amplitudes=int(n_amps),
            )
        )
    return StatsLibrary(
        locations=locations,
        energy_threshold=float(threshold),
        cond_prior=ConductivityPrior(prior_mean, prior_std, prior_clip),
        amp_prior=AmplitudePrior(amp_mean, amp_std),
        master_seed=int(master_seed),
        models_per_location=None if models_per_location < 0 else int(models_per_location),
        n_models_total=int(n_models_total),
        n_amplitudes=int(n_amplitudes),
        n_clipped=int(n_clipped),
        provenance=provenance.hex(),
    )
