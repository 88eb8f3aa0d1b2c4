"""Closed-form potentials for a current dipole in a layered conducting disk.

The model is a unit-thickness disk made of three concentric layers
(brain, skull, scalp) with piecewise-constant conductivity, an insulating
exterior, and a point current dipole inside the innermost layer.  The
potential is expanded in circular harmonics; each harmonic couples the
layers through a small linear system, so the solution is exact up to
series truncation.

These routines are the reference that the finite-element forward solver
is validated against.  They deliberately share no code with the FEM
path: everything here is derived from the series form of the free-field
dipole potential

    u(x) = (1 / (2 pi sigma)) * p . (x - x0) / |x - x0|**2

written in complex notation as Re[pc / (z - z0)] / (2 pi sigma) with
pc = px + i py.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

__all__ = [
    "LayeredDiskSolution",
    "solve_layered_disk",
    "layered_disk_potential",
    "homogeneous_disk_boundary_potential",
]


def _as_complex(point) -> complex:
    p = np.asarray(point, dtype=float).reshape(-1)
    if p.size != 2 or not np.all(np.isfinite(p)):
        raise ValidationError("expected a finite 2-vector, got %r" % (point,))
    return complex(p[0], p[1])


def _check_geometry(radii, conductivities):
    r = tuple(float(v) for v in radii)
    s = tuple(float(v) for v in conductivities)
    if len(r) != 3 or len(s) != 3:
        raise ValidationError("need three radii and three conductivities")
    if not (0.0 < r[0] < r[1] < r[2]):
        raise ValidationError("radii must be positive and strictly increasing")
    if min(s) <= 0.0:
        raise ValidationError("conductivities must be positive")
    return r, s


@dataclass(frozen=True)
class LayeredDiskSolution:
    """Harmonic expansion of the potential for one dipole configuration.

    The expansion stores, per harmonic order n = 1..n_terms, the scaled
    layer coefficients.  Scaling keeps every stored quantity O(1) even
    for hundreds of harmonics: the coefficient of r**n in a layer is
    stored as its value at that layer's outer radius, the coefficient of
    r**-n as its value at the layer's inner radius.

    Use :meth:`potential` and :meth:`radial_current` to evaluate; the
    ``layer`` argument resolves points sitting exactly on an interface.
    """

    radii: tuple[float, float, float]
    conductivities: tuple[float, float, float]
    dipole_position: tuple[float, float]
    dipole_moment: tuple[float, float]
    n_terms: int
    # shape (n_terms,): scaled source coefficient S_n = s_n * r1**-n
    _source: np.ndarray
    # shape (n_terms, 4): scaled coefficients [A1, A2, B2, B3]
    _coeffs: np.ndarray

    def _layer_of(self, radius: float, layer) -> int:
        r1, r2, r3 = self.radii
        if layer is not None:
            layer = int(layer)
            if layer not in (0, 1, 2):
                raise ValidationError("layer must be 0 (brain), 1 (skull) or 2 (scalp)")
            lo = (0.0, r1, r2)[layer]
            hi = (r1, r2, r3)[layer]
            if not (lo - 1e-12 * r3 <= radius <= hi + 1e-12 * r3):
                raise ValidationError(
                    "radius %g outside layer %d [%g, %g]" % (radius, layer, lo, hi)
                )
            return layer
        if radius <= r1:
            return 0
        if radius <= r2:
            return 1
        if radius <= r3 * (1.0 + 1e-12):
            return 2
        raise ValidationError("radius %g outside the disk (r3 = %g)" % (radius, r3))

    def _harmonic_amplitudes(self, radius: float, layer: int, derivative: bool):
        """Per-harmonic complex amplitude c_n so that u = sum Re[c_n e^{-i n theta}].

        With derivative=True returns the amplitudes of du/dr instead.
        """
        r1, r2, r3 = self.radii
        n = np.arange(1, self.n_terms + 1, dtype=float)
        r = float(radius)
        if r <= 0.0:
            raise ValidationError("evaluation radius must be positive")
        z0 = _as_complex(self.dipole_position)
        grow = n / r  # d/dr of (r/R)**n picks up n/r, of (R/r)**n picks up -n/r
        if layer == 0:
            if abs(z0) >= r - 1e-15 * r3:
                raise ValidationError(
                    "brain-layer evaluation requires radius > dipole radius"
                )
            pc = _as_complex(self.dipole_moment)
            sigma_b = self.conductivities[0]
            # s_n * r**-n, arranged so every power has ratio < 1
            ratio = z0 / r
            src = (pc / (2.0 * np.pi * sigma_b * r)) * ratio ** (n - 1.0)
            reg = self._coeffs[:, 0] * (r / r1) ** n
            if derivative:
                return -grow * src + grow * reg
            return src + reg
        if layer == 1:
            reg = self._coeffs[:, 1] * (r / r2) ** n
            dec = self._coeffs[:, 2] * (r1 / r) ** n
            if derivative:
                return grow * reg - grow * dec
            return reg + dec
        q23 = r2 / r3
        b3 = self._coeffs[:, 3]
        reg = b3 * q23**n * (r / r3) ** n
        dec = b3 * (r2 / r) ** n
        if derivative:
            return grow * reg - grow * dec
        return reg + dec

    def _evaluate(self, angles, radius, layer, derivative: bool) -> np.ndarray:
        theta = np.asarray(angles, dtype=float)
        if radius is None:
            radius = self.radii[2]
        lay = self._layer_of(float(radius), layer)
        amps = self._harmonic_amplitudes(float(radius), lay, derivative)
        n = np.arange(1, self.n_terms + 1, dtype=float)
        phases = np.exp(-1j * np.outer(n, theta.reshape(-1)))
        out = np.real(amps @ phases)
        return out.reshape(theta.shape)

    def potential(self, angles, radius=None, layer=None) -> np.ndarray:
        """Potential at polar points (radius, angles).

        Parameters
        ----------
        angles : array_like
            Polar angles in radians.
        radius : float, optional
            Evaluation radius; defaults to the outer boundary.
        layer : int, optional
            Force evaluation with a specific layer's expansion (0 brain,
            1 skull, 2 scalp); needed for two-sided interface checks.

        Returns
        -------
        ndarray
            Potential values, same shape as ``angles``.  The expansion
            has no constant term, so values are zero-mean over the full
            circle; no reference is subtracted here.
        """
        return self._evaluate(angles, radius, layer, derivative=False)

    def radial_current(self, angles, radius, layer=None) -> np.ndarray:
        """Radial current density -sigma * du/dr at polar points.

        Continuous across layer interfaces and zero on the outer
        boundary (insulating exterior).
        """
        lay = self._layer_of(float(radius), layer)
        sigma = self.conductivities[lay]
        return -sigma * self._evaluate(angles, radius, lay, derivative=True)


def solve_layered_disk(
    dipole_position,
    dipole_moment,
    *,
    radii,
    conductivities,
    n_terms: int = 256,
) -> LayeredDiskSolution:
    """Solve the three-layer disk model for one dipole.

    Parameters
    ----------
    dipole_position : array_like, shape (2,)
        Dipole location in meters; must lie strictly inside the
        innermost layer.
    dipole_moment : array_like, shape (2,)
        Dipole moment vector.
    radii : sequence of 3 floats
        Outer radii of brain, skull and scalp layers, increasing.
    conductivities : sequence of 3 floats
        Conductivities of brain, skull and scalp.
    n_terms : int
        Number of circular harmonics.  Terms decay like
        (|x0| / r3)**n, so the default is far past double precision
        for any interior dipole with |x0| <= 0.95 r1.

    Returns
    -------
    LayeredDiskSolution
    """
    radii, conductivities = _check_geometry(radii, conductivities)
    r1, r2, r3 = radii
    sigma_b, sigma_sk, sigma_sc = conductivities
    z0 = _as_complex(dipole_position)
    pc = _as_complex(dipole_moment)
    if abs(z0) >= r1:
        raise ValidationError(
            "dipole radius %g must be strictly inside the brain layer (r1 = %g)"
            % (abs(z0), r1)
        )
    n_terms = int(n_terms)
    if n_terms < 1:
        raise ValidationError("n_terms must be >= 1")

    n = np.arange(1, n_terms + 1, dtype=float)
    q12n = (r1 / r2) ** n
    q23sq = (r2 / r3) ** (2.0 * n)

    # Scaled source coefficient at r1: S_n = s_n r1**-n with
    # s_n = pc z0**(n-1) / (2 pi sigma_b); the ratio form keeps it O(1).
    source = (pc / (2.0 * np.pi * sigma_b * r1)) * (z0 / r1) ** (n - 1.0)

    # Unknowns x = [A1, A2, B2, B3]: the r**n / r**-n coefficients of
    # each layer scaled to their natural radius.  Rows: potential and
    # current continuity at r1, then at r2 (the insulating outer
    # boundary eliminated the scalp r**n coefficient already).
    mat = np.zeros((n_terms, 4, 4))
    mat[:, 0, 0] = 1.0
    mat[:, 0, 1] = -q12n
    mat[:, 0, 2] = -1.0
    mat[:, 1, 0] = sigma_b
    mat[:, 1, 1] = -sigma_sk * q12n
    mat[:, 1, 2] = sigma_sk
    mat[:, 2, 1] = 1.0
    mat[:, 2, 2] = q12n
    mat[:, 2, 3] = -(1.0 + q23sq)
    mat[:, 3, 1] = sigma_sk
    mat[:, 3, 2] = -sigma_sk * q12n
    mat[:, 3, 3] = -sigma_sc * (q23sq - 1.0)

    rhs = np.zeros((n_terms, 4), dtype=complex)
    rhs[:, 0] = -source
    rhs[:, 1] = sigma_b * source

    coeffs = np.linalg.solve(mat.astype(complex), rhs[..., None])[..., 0]

    return LayeredDiskSolution(
        radii=radii,
        conductivities=conductivities,
        dipole_position=(float(np.asarray(dipole_position).reshape(-1)[0]),
                         float(np.asarray(dipole_position).reshape(-1)[1])),
        dipole_moment=(float(np.asarray(dipole_moment).reshape(-1)[0]),
                       float(np.asarray(dipole_moment).reshape(-1)[1])),
        n_terms=n_terms,
        _source=source,
        _coeffs=coeffs,
    )


def layered_disk_potential(
    dipole_position,
    dipole_moment,
    angles,
    *,
    radii,
    conductivities,
    radius=None,
    n_terms: int = 256,
) -> np.ndarray:
    """One-shot boundary potential of a dipole in the three-layer disk.

    Convenience wrapper around :func:`solve_layered_disk`; evaluates at
    the outer boundary unless ``radius`` is given.
    """
    sol = solve_layered_disk(
        dipole_position,
        dipole_moment,
        radii=radii,
        conductivities=conductivities,
        n_terms=n_terms,
    )
    return sol.potential(angles, radius=radius)


def homogeneous_disk_boundary_potential(
    dipole_position, dipole_moment, angles, *, radius: float, sigma: float
) -> np.ndarray:
    """Exact boundary potential of a dipole in a homogeneous disk.

    For an insulated homogeneous disk the harmonic series telescopes to
    a closed form on the boundary: twice the free-field potential,

        u(z) = (1 / (pi sigma)) Re[pc / (z - z0)],   |z| = radius.

    The same expression follows from the disk Neumann function by the
    inversion identity |z - z0*| |z0| = |z - z0| R on |z| = R, which
    makes this an independent check on the series solution.
    """
    radius = float(radius)
    sigma = float(sigma)
    if radius <= 0.0 or sigma <= 0.0:
        raise ValidationError("radius and sigma must be positive")
    z0 = _as_complex(dipole_position)
    pc = _as_complex(dipole_moment)
    if abs(z0) >= radius:
        raise ValidationError("dipole must lie strictly inside the disk")
    theta = np.asarray(angles, dtype=float)
    z = radius * np.exp(1j * theta)
    return np.real(pc / (z - z0)) / (np.pi * sigma)
