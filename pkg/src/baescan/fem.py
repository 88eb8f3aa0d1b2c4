"""Piecewise-linear FEM forward model on disk head meshes.

Builds stiffness matrices for piecewise-constant conductivity, electrode
transfer matrices for the average-referenced montage, and lead-field
matrices A in R^{m x 2n} whose column pair (2i, 2i+1) holds the
electrode potentials of unit x- and y-moment dipoles at source
position i.

The pure-Neumann system is grounded by fixing one interior node during
solves; the constant mode is then removed by subtracting the mean, so
transfer matrices satisfy T 1 = 0.  Both electrode loads and dipole
loads carry zero total current, so the grounding choice does not leak
into the physics.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    FileFormatError,
    SingularSystemError,
    ValidationError,
)
from .headmesh import HeadMesh

__all__ = [
    "ConductivityAssignment",
    "Dipole",
    "LeadField",
    "assemble_stiffness",
    "compartment_stiffness",
    "compute_transfer_matrix",
    "source_load_matrix",
    "build_lead_field",
    "build_skull_sample_lead_fields",
    "forward_map",
    "lead_field_fingerprint",
    "save_lead_field",
    "load_lead_field",
    "save_sample_lead_fields",
    "load_sample_lead_fields",
]

_LEADFIELD_MAGIC = b"BSLEADF1"
_LEADFIELD_VERSION = 1
_SAMPLES_MAGIC = b"BSSAMPS1"
_SAMPLES_VERSION = 1


@dataclass(frozen=True)
class ConductivityAssignment:
    """Compartment conductivities in S/m."""

    brain: float
    skull: float
    scalp: float

    def __post_init__(self):
        for name in ("brain", "skull", "scalp"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0.0):
                raise ValidationError("%s conductivity must be positive" % name)

    def by_compartment(self) -> np.ndarray:
        """Values ordered like headmesh.COMPARTMENT_NAMES."""
        return np.array([self.brain, self.skull, self.scalp])


@dataclass(frozen=True)
class Dipole:
    """Single dipole on the source grid: location index plus moment (A m)."""

    location_index: int
    moment: tuple[float, float]


@dataclass
class LeadField:
    """Lead-field matrix with its electrode bookkeeping.

    ``matrix`` has shape (m, 2n); source location i owns columns 2i
    (unit x moment) and 2i+1 (unit y moment).  All columns are
    average-referenced.  ``electrode_nodes`` records which mesh nodes
    the rows correspond to; it is metadata, not persisted in the binary
    format, and may be None for loaded instances.
    """

    matrix: np.ndarray
    electrode_nodes: np.ndarray | None = None
    reference: str = "average"

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[1] % 2 != 0:
            raise ValidationError("lead field matrix must be m x 2n")

    @property
    def n_electrodes(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_sources(self) -> int:
        return self.matrix.shape[1] // 2

    def columns(self, location_index: int) -> np.ndarray:
        i = int(location_index)
        if not (0 <= i < self.n_sources):
            raise ValidationError("source index %d out of range" % i)
        return self.matrix[:, 2 * i : 2 * i + 2]


def _element_geometry(mesh: HeadMesh):
    """Per-element P1 gradient coefficients and areas.

    Returns (bg, cg, area): gradient of basis function j in element e is
    (bg[e, j], cg[e, j]) / (2 area[e]).
    """
    p = mesh.nodes[mesh.triangles]  # (M, 3, 2)
    x, y = p[..., 0], p[..., 1]
    bg = y[:, [1, 2, 0]] - y[:, [2, 0, 1]]
    cg = x[:, [2, 0, 1]] - x[:, [1, 2, 0]]
    area2 = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (
        y[:, 1] - y[:, 0]
    )
    if np.any(area2 <= 0.0):
        raise ValidationError("mesh contains degenerate or misoriented triangles")
    return bg, cg, 0.5 * area2


def compartment_stiffness(mesh: HeadMesh):
    """Unit-conductivity stiffness matrix of each compartment.

    The full matrix for any assignment is the conductivity-weighted sum
    of these three, which both makes repeated assembly cheap when only
    the skull value changes and keeps it bit-reproducible.
    """
    bg, cg, area = _element_geometry(mesh)
    scale = 1.0 / (4.0 * area)
    ke = (bg[:, :, None] * bg[:, None, :] + cg[:, :, None] * cg[:, None, :]) * scale[
        :, None, None
    ]
    n = mesh.n_nodes
    out = []
    for code in range(3):
        mask = mesh.compartment == code
        tris = mesh.triangles[mask]
        rows = np.repeat(tris, 3, axis=1).ravel()
        cols = np.tile(tris, (1, 3)).ravel()
        k = sp.coo_matrix((ke[mask].ravel(), (rows, cols)), shape=(n, n)).tocsr()
        out.append(k)
    return tuple(out)


def assemble_stiffness(mesh: HeadMesh, cond: ConductivityAssignment) -> sp.csr_matrix:
    """Stiffness matrix K(sigma), symmetric PSD with a constant null space."""
    parts = compartment_stiffness(mesh)
    return combine_stiffness(parts, cond)


def combine_stiffness(parts, cond: ConductivityAssignment) -> sp.csr_matrix:
    kb, ks, kc = parts
    return (cond.brain * kb + cond.skull * ks + cond.scalp * kc).tocsr()


def _grounded_factor(stiffness: sp.spmatrix, ground_node: int):
    n = stiffness.shape[0]
    keep = np.delete(np.arange(n), ground_node)
    reduced = stiffness.tocsc()[keep][:, keep]
    try:
        lu = spla.splu(reduced.tocsc())
    except RuntimeError as exc:  # raised by SuperLU on exact singularity
        raise SingularSystemError("grounded stiffness matrix is singular") from exc
    return lu, keep


def compute_transfer_matrix(
    stiffness: sp.spmatrix, electrodes, ground_node: int = 0
) -> np.ndarray:
    """Transfer matrix T (m x N) of an average-referenced electrode montage.

    Row k solves K u = b_k where b_k is the electrode indicator load
    referenced against the montage mean (1 - 1/m at electrode k, -1/m at
    the others).  The system is grounded at ``ground_node`` (an interior
    node, never an electrode) and the constant mode is removed
    afterwards, so T 1 = 0 exactly up to roundoff.  For any zero-sum
    source load b, the electrode potentials of that source are T b.
    """
    electrodes = np.asarray(electrodes, dtype=np.int64)
    n = stiffness.shape[0]
    m = electrodes.size
    if m < 2 or np.unique(electrodes).size != m:
        raise ValidationError("electrodes must be at least 2 distinct nodes")
    if electrodes.min() < 0 or electrodes.max() >= n:
        raise ValidationError("electrode node index out of range")
    ground_node = int(ground_node)
    if not (0 <= ground_node < n):
        raise ValidationError("ground node out of range")
    if ground_node in set(electrodes.tolist()):
        raise ValidationError("ground node must not be an electrode")

    loads = np.zeros((n, m))
    loads[electrodes, np.arange(m)] = 1.0
    loads[electrodes, :] -= 1.0 / m

    lu, keep = _grounded_factor(stiffness, ground_node)
    sol = lu.solve(loads[keep])
    if not np.all(np.isfinite(sol)):
        raise SingularSystemError("transfer-matrix solve produced non-finite values")
    potentials = np.zeros((n, m))
    potentials[keep] = sol
    potentials -= potentials.mean(axis=0, keepdims=True)
    return np.ascontiguousarray(potentials.T)


def source_load_matrix(mesh: HeadMesh, positions) -> sp.csc_matrix:
    """Dipole load vectors for unit x/y moments at each source position.

    The load of moment q at x0 is b_j = q . grad(phi_j)(x0), from
    partial integration of the dipole term against the P1 basis.  When
    x0 sits on an element interface or node, the gradient is averaged
    over all containing elements with area weights; this keeps loads
    independent of element ordering and exactly mirror-symmetric on the
    symmetric meshes (interior positions reduce to the single containing
    element).

    Returns a sparse (n_nodes, 2n) matrix whose column 2i is the unit
    x-moment load for position i and column 2i+1 the unit y-moment load.
    """
    pos = np.atleast_2d(np.asarray(positions, dtype=float))
    if pos.ndim != 2 or pos.shape[1] != 2:
        raise ValidationError("positions must be an (n, 2) array")
    bg, cg, area = _element_geometry(mesh)
    tri_pts = mesh.nodes[mesh.triangles]
    v0 = tri_pts[:, 1] - tri_pts[:, 0]
    v1 = tri_pts[:, 2] - tri_pts[:, 0]
    det = 2.0 * area

    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    vals: list[np.ndarray] = []
    for i, p in enumerate(pos):
        d = p[None, :] - tri_pts[:, 0]
        l1 = (d[:, 0] * v1[:, 1] - d[:, 1] * v1[:, 0]) / det
        l2 = (v0[:, 0] * d[:, 1] - v0[:, 1] * d[:, 0]) / det
        l0 = 1.0 - l1 - l2
        inside = (l0 >= -1e-12) & (l1 >= -1e-12) & (l2 >= -1e-12)
        hits = np.nonzero(inside)[0]
        if hits.size == 0:
            raise ValidationError(
                "source position %s lies outside the mesh" % (p.tolist(),)
            )
        w = area[hits]
        w = w / w.sum()
        # area-weighted average of per-element gradients, (3, 2) per hit
        gx = (w[:, None] * bg[hits] / det[hits, None]).ravel()
        gy = (w[:, None] * cg[hits] / det[hits, None]).ravel()
        node_idx = mesh.triangles[hits].ravel()
        rows.append(node_idx)
        cols.append(np.full(node_idx.size, 2 * i, dtype=np.int64))
        vals.append(gx)
        rows.append(node_idx)
        cols.append(np.full(node_idx.size, 2 * i + 1, dtype=np.int64))
        vals.append(gy)

    loads = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(mesh.n_nodes, 2 * pos.shape[0]),
    )
    return loads.tocsc()


def build_lead_field(
    mesh: HeadMesh,
    cond: ConductivityAssignment,
    source_positions,
    electrodes,
    ground_node: int = 0,
) -> LeadField:
    """Lead field A(sigma) for dipoles at the given positions.

    Uses the transfer-matrix route: m grounded solves shared by all
    sources instead of 2n direct solves.
    """
    stiffness = assemble_stiffness(mesh, cond)
    transfer = compute_transfer_matrix(stiffness, electrodes, ground_node)
    loads = source_load_matrix(mesh, source_positions)
    matrix = (loads.T @ transfer.T).T
    return LeadField(matrix=matrix, electrode_nodes=np.asarray(electrodes, np.int64))


def build_skull_sample_lead_fields(
    mesh: HeadMesh,
    skull_values,
    base: ConductivityAssignment,
    source_positions,
    electrodes,
    ground_node: int = 0,
) -> list[LeadField]:
    """Lead fields for many skull conductivities, sharing all other work.

    Compartment matrices and dipole loads are assembled once; only the
    grounded factorization is redone per skull value.  Entry k equals
    build_lead_field(mesh, base with skull_values[k], ...) exactly: the
    combination path is identical, so results are bit-reproducible.
    """
    parts = compartment_stiffness(mesh)
    loads = source_load_matrix(mesh, source_positions)
    electrodes = np.asarray(electrodes, dtype=np.int64)
    out = []
    for sk in np.asarray(skull_values, dtype=float):
        cond = ConductivityAssignment(brain=base.brain, skull=float(sk), scalp=base.scalp)
        stiffness = combine_stiffness(parts, cond)
        transfer = compute_transfer_matrix(stiffness, electrodes, ground_node)
        matrix = (loads.T @ transfer.T).T
        out.append(LeadField(matrix=matrix, electrode_nodes=electrodes.copy()))
    return out


def forward_map(lead_field: LeadField, dipole: Dipole) -> np.ndarray:
    """Noiseless electrode potentials of a single dipole, v = A d."""
    cols = lead_field.columns(dipole.location_index)
    moment = np.asarray(dipole.moment, dtype=float).reshape(2)
    return cols @ moment


def lead_field_fingerprint(lead_field: LeadField) -> str:
    """SHA-256 over the canonical binary serialization of the matrix."""
    return hashlib.sha256(_serialize(lead_field)).hexdigest()


def _serialize(lead_field: LeadField) -> bytes:
    m, two_n = lead_field.matrix.shape
    header = _LEADFIELD_MAGIC + struct.pack(
        "<III", _LEADFIELD_VERSION, m, two_n // 2
    )
    body = np.ascontiguousarray(lead_field.matrix, dtype="<f8").tobytes()
    return header + body


def save_lead_field(lead_field: LeadField, path) -> None:
    """Write the binary lead-field container.

    Byte layout: 8-byte magic ``BSLEADF1``; three little-endian uint32
    fields (format version, electrode count m, source count n); then
    m * 2n little-endian float64 matrix entries, row-major.
    """
    with open(path, "wb") as f:
        f.write(_serialize(lead_field))


def load_lead_field(path) -> LeadField:
    """Read a lead field written by :func:`save_lead_field`.

    Electrode-node metadata is not part of the format; loaded instances
    have electrode_nodes = None.
    """
    with open(path, "rb") as f:
        blob = f.read()
    return _deserialize(blob, str(path))


def _deserialize(blob: bytes, label: str) -> LeadField:
    head = len(_LEADFIELD_MAGIC) + 12
    if len(blob) < head:
        raise FileFormatError("%s: truncated lead-field file" % label)
    if blob[: len(_LEADFIELD_MAGIC)] != _LEADFIELD_MAGIC:
        raise FileFormatError("%s: bad lead-field magic" % label)
    version, m, n = struct.unpack("<III", blob[len(_LEADFIELD_MAGIC) : head])
    if version != _LEADFIELD_VERSION:
        raise FileFormatError("%s: unsupported lead-field version %d" % (label, version))
    expect = head + m * 2 * n * 8
    if len(blob) != expect:
        raise FileFormatError(
            "%s: lead-field payload has %d bytes, expected %d"
            % (label, len(blob) - head, expect - head)
        )
    matrix = np.frombuffer(blob[head:], dtype="<f8").reshape(m, 2 * n).copy()
    return LeadField(matrix=matrix, electrode_nodes=None)


def save_sample_lead_fields(sample_lead_fields, skull_values, base: LeadField, path) -> None:
    """Write the skull-sample lead-field container.

    Byte layout: 8-byte magic ``BSSAMPS1``; two little-endian uint32
    fields (format version, sample count K); 32-byte raw sha-256 of the
    base lead field the samples belong with; K little-endian float64
    skull conductivities; then K single-lead-field records in the
    :func:`save_lead_field` layout, back to back.
    """
    skull_values = np.ascontiguousarray(skull_values, dtype="<f8").reshape(-1)
    samples = list(sample_lead_fields)
    if len(samples) != skull_values.size or not samples:
        raise ValidationError("need one skull value per sample lead field")
    shape = samples[0].matrix.shape
    for lf in samples:
        if lf.matrix.shape != shape:
            raise ValidationError("sample lead fields must share one shape")
    parts = [
        _SAMPLES_MAGIC,
        struct.pack("<II", _SAMPLES_VERSION, len(samples)),
        bytes.fromhex(lead_field_fingerprint(base)),
        skull_values.tobytes(),
    ]
    parts.extend(_serialize(lf) for lf in samples)
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_sample_lead_fields(path) -> tuple[list[LeadField], np.ndarray, str]:
    """Read a container written by :func:`save_sample_lead_fields`.

    Returns (sample lead fields, skull conductivities, base lead-field
    fingerprint hex) so callers can verify the samples match the base
    model they are about to be combined with.
    """
    label = str(path)
    with open(path, "rb") as f:
        blob = f.read()
    head = len(_SAMPLES_MAGIC) + 8 + 32
    if len(blob) < head:
        raise FileFormatError("%s: truncated sample container" % label)
    if blob[: len(_SAMPLES_MAGIC)] != _SAMPLES_MAGIC:
        raise FileFormatError("%s: bad sample container magic" % label)
    version, count = struct.unpack("<II", blob[len(_SAMPLES_MAGIC) : len(_SAMPLES_MAGIC) + 8])
    if version != _SAMPLES_VERSION:
        raise FileFormatError("%s: unsupported sample container version %d" % (label, version))
    if count < 1:
        raise FileFormatError("%s: empty sample container" % label)
    fingerprint = blob[len(_SAMPLES_MAGIC) + 8 : head].hex()
    offset = head + 8 * count
    if len(blob) < offset:
        raise FileFormatError("%s: truncated skull value table" % label)
    skull_values = np.frombuffer(blob[head:offset], dtype="<f8").copy()
    record_head = len(_LEADFIELD_MAGIC) + 12
    samples = []
    for k in range(count):
        if len(blob) < offset + record_head:
            raise FileFormatError("%s: truncated sample record %d" % (label, k))
        _, m, n = struct.unpack(
            "<III", blob[offset + len(_LEADFIELD_MAGIC) : offset + record_head]
        )
        end = offset + record_head + m * 2 * n * 8
        if len(blob) < end:
            raise FileFormatError("%s: truncated sample record %d" % (label, k))
        samples.append(_deserialize(blob[offset:end], "%s[%d]" % (label, k)))
        offset = end
    if offset != len(blob):
        raise FileFormatError("%s: trailing bytes after last sample record" % label)
    return samples, skull_values, fingerprint
