"""Single-dipole scanning with optional approximation-error augmentation.

The standard scan sweeps every candidate source location, fits the two
moment components by whitened least squares, and keeps the location with
the smallest residual functional.  The augmented scan additionally fits
the retained approximation-error coordinates per location, penalised by
their marginal variances, and maps the winning coordinates to a skull
conductivity estimate through the sampled cross covariance.
"""

from dataclasses import dataclass

import numpy as np

from .baestats import ConductivityPrior, ErrorStats, StatsLibrary
from .errors import (
    ConfigurationError,
    DegenerateStatisticsError,
    ValidationError,
)
from .fem import LeadField, lead_field_fingerprint

# relative eigenvalue cutoff below which a noise-covariance mode is
# treated as exactly degenerate and excluded from the whitener
_WHITEN_CUTOFF = 1e-12


@dataclass(frozen=True)
class NoiseModel:
    """Gaussian measurement-noise model on the electrode array.

    `covariance` may be singular; whitening happens on its range.  For
    average-referenced recordings the natural choice is a scaled
    projector onto the zero-sum subspace, see `average_reference_noise`.
    """

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.ascontiguousarray(np.asarray(self.mean, dtype=np.float64))
        cov = np.ascontiguousarray(np.asarray(self.covariance, dtype=np.float64))
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise ValidationError("noise mean and covariance shapes disagree")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise ValidationError("noise model contains non-finite entries")
        scale = np.abs(cov).max()
        if np.abs(cov - cov.T).max() > 1e-10 * max(scale, 1e-300):
            raise ValidationError("noise covariance must be symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def n_electrodes(self) -> int:
        return self.mean.size


def average_reference_noise(n_electrodes: int, level: float) -> NoiseModel:
    """Zero-mean noise with covariance level**2 * (I - 11^T/m)."""
    m = int(n_electrodes)
    if m < 2:
        raise ValidationError("noise model needs at least two electrodes")
    level = float(level)
    if not (level > 0.0 and np.isfinite(level)):
        raise ValidationError("noise level must be positive and finite")
    cov = level**2 * (np.eye(m) - np.full((m, m), 1.0 / m))
    return NoiseModel(mean=np.zeros(m), covariance=cov)


def subspace_whitener(covariance) -> np.ndarray:
    """Return L with L C L^T = I on the range of the symmetric PSD C.

    Modes with eigenvalues at or below `_WHITEN_CUTOFF` times the largest
    are dropped, so L has one row per retained mode and L^T L is the
    pseudo-inverse of C.
    """
    cov = np.asarray(covariance, dtype=np.float64)
    eigvals, eigvecs = np.linalg.eigh(cov)
    top = eigvals[-1]
    if not top > 0.0:
        raise ValidationError("covariance has no positive eigenvalues")
    keep = eigvals > top * _WHITEN_CUTOFF
    return eigvecs[:, keep].T / np.sqrt(eigvals[keep])[:, None]


@dataclass
class ScanResult:
    """Per-location fits plus the winning location of one scan."""

    winner: int
    dipoles: np.ndarray
    functional_values: np.ndarray
    alphas: list | None = None
    sigma_estimate: float | None = None

    @property
    def dipole(self) -> np.ndarray:
        return self.dipoles[self.winner]

    @property
    def alpha(self):
        if self.alphas is None:
            return None
        return self.alphas[self.winner]


def _validate_measurement(v, n_electrodes: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.size != n_electrodes:
        raise ValidationError(
            f"measurement has {v.size} channels, lead field has {n_electrodes}"
        )
    if not np.all(np.isfinite(v)):
        raise ValidationError("measurement contains non-finite entries")
    norm = np.linalg.norm(v)
    if abs(v.sum()) > 1e-8 * max(norm, 1e-300):
        raise ValidationError("measurement is not average-referenced")
    return v


class StandardScanOperator:
    """Reusable whitened least-squares scan over all candidate locations."""

    def __init__(self, lead_field: LeadField, noise_model: NoiseModel):
        if noise_model.n_electrodes != lead_field.n_electrodes:
            raise ValidationError("noise model and lead field sizes disagree")
        self.lead_field = lead_field
        self.noise_model = noise_model
        self._whitener = subspace_whitener(noise_model.covariance)
        n = lead_field.n_sources
        m = lead_field.n_electrodes
        # whitened per-location designs, stacked (n, r, 2)
        designs = self._whitener @ lead_field.matrix.reshape(m, n, 2).transpose(1, 0, 2)
        self._designs = np.ascontiguousarray(designs)
        self._pinvs = np.linalg.pinv(self._designs)

    def scan(self, v) -> ScanResult:
        v = _validate_measurement(v, self.lead_field.n_electrodes)
        y = self._whitener @ (v - self.noise_model.mean)
        dipoles = self._pinvs @ y
        residuals = y[None, :] - np.einsum("nrc,nc->nr", self._designs, dipoles)
        functional = np.einsum("nr,nr->n", residuals, residuals)
        winner = int(np.argmin(functional))
        return ScanResult(
            winner=winner, dipoles=dipoles, functional_values=functional
        )


def _conditional_sigma(alpha, stats: ErrorStats, prior: ConductivityPrior) -> float:
    """Posterior-mean conductivity given retained coordinates, skipping
    zero-variance modes whose coordinates are pinned to zero."""
    lam = stats.eigenvalues[: stats.p]
    active = lam > 0.0
    if not np.any(active):
        return prior.mean
    return prior.mean + float(
        stats.cross_cov[active] @ (np.asarray(alpha)[active] / lam[active])
    )


def estimate_conductivity(alpha, stats: ErrorStats, prior: ConductivityPrior) -> float:
    """Map retained error coordinates to a skull conductivity estimate."""
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
    if alpha.size != stats.p:
        raise ValidationError("alpha length must equal the retained dimension")
    lam = stats.eigenvalues[: stats.p]
    if np.any(lam <= 0.0):
        raise DegenerateStatisticsError(
            "retained eigenvalues must be positive to estimate conductivity"
        )
    return prior.mean + float(stats.cross_cov @ (alpha / lam))


class BaeScanOperator:
    """Scan that fits dipole moment and retained error coordinates jointly.

    Per location the model is v = A_i d + W alpha + (residual + noise)
    with alpha ~ N(0, diag(retained eigenvalues)).  Whitening uses the
    pseudo-inverse of the combined residual-plus-noise covariance, and
    the retained coordinates enter the functional through their prior.
    Retained modes with exactly zero variance are pinned to alpha = 0,
    which reduces the fit to the standard scan when every mode is pinned
    and the error mean vanishes.
    """

    def __init__(
        self,
        lead_field: LeadField,
        stats_library: StatsLibrary,
        noise_model: NoiseModel,
        *,
        check_provenance: bool = True,
    ):
        if noise_model.n_electrodes != lead_field.n_electrodes:
            raise ValidationError("noise model and lead field sizes disagree")
        if stats_library.n_locations != lead_field.n_sources:
            raise ConfigurationError(
                "statistics library and lead field cover different source spaces"
            )
        if stats_library.n_electrodes != lead_field.n_electrodes:
            raise ConfigurationError(
                "statistics library and lead field electrode counts disagree"
            )
        if check_provenance and stats_library.provenance != lead_field_fingerprint(
            lead_field
        ):
            raise ConfigurationError(
                "statistics library was built for a different lead field"
            )
        self.lead_field = lead_field
        self.stats_library = stats_library
        self.noise_model = noise_model

        self._whiteners = []
        self._designs = []
        self._pinvs = []
        self._active = []
        for i, stats in enumerate(stats_library.locations):
            whitener = subspace_whitener(
                stats.residual_covariance() + noise_model.covariance
            )
            lam = stats.eigenvalues[: stats.p]
            active = lam > 0.0
            cols = lead_field.columns(i)
            top = np.hstack(
                [whitener @ cols, whitener @ stats.eigenvectors[:, : stats.p][:, active]]
            )
            q = int(np.count_nonzero(active))
            bottom = np.hstack(
                [np.zeros((q, 2)), np.diag(1.0 / np.sqrt(lam[active]))]
            )
            design = np.vstack([top, bottom])
            self._whiteners.append(whitener)
            self._designs.append(design)
            self._pinvs.append(np.linalg.pinv(design))
            self._active.append(active)

    def scan(self, v) -> ScanResult:
        v = _validate_measurement(v, self.lead_field.n_electrodes)
        n = self.lead_field.n_sources
        dipoles = np.empty((n, 2))
        functional = np.empty(n)
        alphas = []
        shifted = v - self.noise_model.mean
        for i, stats in enumerate(self.stats_library.locations):
            y_top = self._whiteners[i] @ (shifted - stats.eps_mean)
            q = int(np.count_nonzero(self._active[i]))
            y = np.concatenate([y_top, np.zeros(q)])
            x = self._pinvs[i] @ y
            resid = y - self._designs[i] @ x
            dipoles[i] = x[:2]
            alpha = np.zeros(stats.p)
            alpha[self._active[i]] = x[2:]
            alphas.append(alpha)
            functional[i] = resid @ resid
        winner = int(np.argmin(functional))
        sigma = _conditional_sigma(
            alphas[winner],
            self.stats_library.locations[winner],
            self.stats_library.cond_prior,
        )
        return ScanResult(
            winner=winner,
            dipoles=dipoles,
            functional_values=functional,
            alphas=alphas,
            sigma_estimate=sigma,
        )


def standard_scan(lead_field: LeadField, v, noise_model: NoiseModel) -> ScanResult:
    """One-shot standard scan; build the operator directly to amortise
    the setup over repeated measurements."""
    return StandardScanOperator(lead_field, noise_model).scan(v)


def bae_scan(
    lead_field: LeadField,
    stats_library: StatsLibrary,
    v,
    noise_model: NoiseModel,
    *,
    check_provenance: bool = True,
) -> ScanResult:
    """One-shot augmented scan; see `BaeScanOperator`."""
    operator = BaeScanOperator(
        lead_field, stats_library, noise_model, check_provenance=check_provenance
    )
    return operator.scan(v)
