"""Meshlets: regular grids resampled from a geodesic disk, their poses and file format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateTangentsError, InsufficientCoverage, ParamFailure, ParseError
from .geodesic import GeoParam, geodesic_param, stretch_reject
from .mesh import TriMesh

GRID_SIZE = 31
MIN_VALID_FRACTION = 0.6


@dataclass(frozen=True)
class Pose:
    """Rigid transform mapping canonical coordinates to world: ``x -> R x + T``."""

    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    def apply(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.rotation.T + self.translation

    def apply_inverse(self, y) -> np.ndarray:
        return (np.asarray(y, dtype=float) - self.translation) @ self.rotation

    def compose(self, other: Pose) -> Pose:
        """``self`` after ``other``."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> Pose:
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)


def apply_pose(grid, pose: Pose) -> np.ndarray:
    return pose.apply(grid)


@dataclass
class Meshlet:
    """A ``n x n`` grid of surface samples with its pose and provenance.

    ``grid[r, c]`` sits at planar offset ``((c - n//2) h, (r - n//2) h)``, so
    columns run along mu and rows along nu. ``corr_face`` / ``corr_bary``
    locate each cell on the source mesh (``-1`` where ``valid`` is False).
    """

    grid: np.ndarray
    spacing: float
    valid: np.ndarray
    pose: Pose = field(default_factory=Pose.identity)
    latent: np.ndarray | None = None
    corr_face: np.ndarray | None = None
    corr_bary: np.ndarray | None = None
    center: int = -1

    @property
    def size(self) -> int:
        return self.grid.shape[0]

    @property
    def half(self) -> int:
        return self.grid.shape[0] // 2

    def canonical_grid(self) -> np.ndarray:
        return self.pose.apply_inverse(self.grid)

    def points(self) -> np.ndarray:
        """Valid grid points as ``(K, 3)``."""
        return self.grid[self.valid]


def _planar_targets(n: int, spacing: float) -> np.ndarray:
    half = n // 2
    offs = (np.arange(n) - half) * spacing
    mu, nu = np.meshgrid(offs, offs)          # mu varies along columns
    return np.stack([mu, nu], axis=-1)


def sample_grid(param: GeoParam, mesh: TriMesh, spacing: float, grid_size: int = GRID_SIZE,
                min_valid_fraction: float = MIN_VALID_FRACTION) -> Meshlet:
    """Resample the parametrized disk at the integer lattice ``(i h, j h)``.

    Each lattice point is located in a planar triangle and mapped to the
    surface with the same barycentric weights.
    """
    if grid_size % 2 != 1:
        raise ValueError("grid_size must be odd so the grid has a center cell")
    targets = _planar_targets(grid_size, spacing).reshape(-1, 2)
    P = param.uv[param.faces]                         # (M, 3, 2)
    p0 = P[:, 0]
    e1 = P[:, 1] - p0
    e2 = P[:, 2] - p0
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    good = det > 1e-300
    inv_det = np.where(good, 1.0 / np.where(good, det, 1.0), 0.0)
    rel = targets[:, None, :] - p0[None, :, :]        # (T, M, 2)
    b1 = (rel[..., 0] * e2[:, 1] - rel[..., 1] * e2[:, 0]) * inv_det
    b2 = (e1[:, 0] * rel[..., 1] - e1[:, 1] * rel[..., 0]) * inv_det
    b0 = 1.0 - b1 - b2
    bary = np.stack([b0, b1, b2], axis=-1)            # (T, M, 3)
    score = bary.min(axis=-1)
    score[:, ~good] = -np.inf
    best = np.argmax(score, axis=1)                   # first max = lowest face index on ties
    rows = np.arange(len(targets))
    inside = score[rows, best] >= -1e-9
    b = np.clip(bary[rows, best], 0.0, None)
    b /= b.sum(axis=1, keepdims=True)
    X = param.positions[param.faces[best]]            # (T, 3, 3)
    pts = np.einsum("tk,tkd->td", b, X)

    n = grid_size
    valid = inside.reshape(n, n)
    if valid.mean() < min_valid_fraction:
        raise InsufficientCoverage(
            f"only {valid.mean():.0%} of grid cells inside the parametrized disk")
    grid = np.where(inside[:, None], pts, np.nan).reshape(n, n, 3)
    corr_face = np.where(inside, param.face_ids[best], -1).reshape(n, n)
    corr_bary = np.where(inside[:, None], b, 0.0).reshape(n, n, 3)
    return Meshlet(grid, spacing, valid, Pose.identity(), None, corr_face, corr_bary, param.center)


def _center_tangents(grid: np.ndarray, valid: np.ndarray):
    h = grid.shape[0] // 2
    need = [(h, h - 1), (h, h + 1), (h - 1, h), (h + 1, h), (h, h)]
    if not all(valid[r, c] for r, c in need):
        raise DegenerateTangentsError("center neighbourhood of the grid is not valid")
    t_mu = 0.5 * (grid[h, h + 1] - grid[h, h - 1])
    t_nu = 0.5 * (grid[h + 1, h] - grid[h - 1, h])
    return grid[h, h], t_mu, t_nu


def canonical_pose(m: Meshlet) -> tuple[Pose, Meshlet]:
    """Pose taking the canonical frame to the meshlet's world placement.

    In the canonical frame the center cell is at the origin, the center
    normal (cross product of the central-difference mu/nu tangents) is +z,
    and the mu tangent lies along +x. Returns the pose and a copy of ``m``
    whose grid is expressed in that canonical frame.
    """
    c, t_mu, t_nu = _center_tangents(m.grid, m.valid)
    nrm = np.cross(t_mu, t_nu)
    nl = np.linalg.norm(nrm)
    if not np.isfinite(nl) or nl <= 1e-300:
        raise DegenerateTangentsError("grid tangents at the center are parallel")
    z = nrm / nl
    x = t_mu - np.dot(t_mu, z) * z
    xl = np.linalg.norm(x)
    if xl <= 1e-300:
        raise DegenerateTangentsError("mu tangent is parallel to the normal")
    x /= xl
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=1)
    pose = Pose(R, c.copy())
    canon = replace(m, grid=pose.apply_inverse(m.grid), pose=Pose.identity())
    return pose, canon


def canonicalize(m: Meshlet) -> Meshlet:
    """Same world grid with its canonical pose attached."""
    pose, _ = canonical_pose(m)
    return replace(m, pose=pose)


def grid_normals(grid) -> np.ndarray:
    """Unit normals from central-difference grid tangents (one-sided at borders)."""
    g = grid.grid if isinstance(grid, Meshlet) else np.asarray(grid, dtype=float)
    t_mu = np.gradient(g, axis=1)
    t_nu = np.gradient(g, axis=0)
    nrm = np.cross(t_mu, t_nu)
    nl = np.linalg.norm(nrm, axis=-1, keepdims=True)
    if not np.all(nl[np.isfinite(nl)] > 0):
        raise DegenerateTangentsError("parallel grid tangents")
    return nrm / nl


def extract_meshlet(mesh: TriMesh, center: int, spacing: float, grid_size: int = GRID_SIZE,
                    min_valid_fraction: float = MIN_VALID_FRACTION,
                    max_stretch: float | None = None, max_stretch_fraction: float = 0.1,
                    param_margin: float | None = None) -> Meshlet:
    """Parametrize, resample and canonicalize the meshlet centered at ``center``.

    With ``max_stretch`` set, anisotropic parametrizations (see
    :func:`stretch_reject`) raise :class:`ParamFailure`.
    """
    half = grid_size // 2
    if param_margin is None:
        param_margin = 2.0 * float(np.median(mesh.edge_lengths))
    radius = half * spacing * np.sqrt(2.0) + param_margin
    param = geodesic_param(mesh, center, radius)
    if max_stretch is not None and stretch_reject(param, max_stretch, max_stretch_fraction):
        raise ParamFailure(f"meshlet at {center} rejected for anisotropic stretch")
    m = sample_grid(param, mesh, spacing, grid_size, min_valid_fraction)
    return canonicalize(m)


# *** vector form used by the autoencoder ***

def footprint_scale(spacing: float, grid_size: int) -> float:
    """Half-width of the meshlet footprint; canonical grids are divided by it."""
    return (grid_size // 2) * spacing


def to_unit(canonical_grid: np.ndarray, spacing: float) -> np.ndarray:
    n = canonical_grid.shape[-2]
    return canonical_grid / footprint_scale(spacing, n)


def from_unit(unit_grid: np.ndarray, spacing: float) -> np.ndarray:
    n = unit_grid.shape[-2]
    return unit_grid * footprint_scale(spacing, n)


def grid_to_vector(grid: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """Flatten ``(..., n, n, 3)`` grids; invalid cells become zeros."""
    g = np.array(grid, dtype=float)
    if valid is not None:
        g = np.where(valid[..., None], g, 0.0)
    return g.reshape(*g.shape[:-3], -1)


def vector_to_grid(vec: np.ndarray) -> np.ndarray:
    v = np.asarray(vec)
    n = int(round((v.shape[-1] / 3) ** 0.5))
    if 3 * n * n != v.shape[-1]:
        raise ValueError(f"vector length {v.shape[-1]} is not 3*n*n")
    return v.reshape(*v.shape[:-1], n, n, 3)


# *** .mlc corpus files ***

_MLC_MAGIC = b"MLC1"


def write_mlc(path, grids, valid) -> None:
    """Write canonical grids ``(N, n, n, 3)`` and validity masks ``(N, n, n)``."""
    grids = np.asarray(grids, dtype="<f4")
    valid = np.asarray(valid, dtype=bool)
    if grids.ndim != 4 or grids.shape[-1] != 3 or valid.shape != grids.shape[:3]:
        raise ValueError("expected grids (N, rows, cols, 3) and matching valid (N, rows, cols)")
    n, rows, cols, _ = grids.shape
    with open(path, "wb") as fh:
        fh.write(_MLC_MAGIC + struct.pack("<IHH", n, rows, cols))
        for g, v in zip(grids, valid):
            fh.write(np.where(v[..., None], g, 0.0).astype("<f4").tobytes())
            fh.write(v.astype(np.uint8).tobytes())


class MlcWriter:
    """Streaming ``.mlc`` writer; the count in the header is patched on close."""

    def __init__(self, path, rows: int, cols: int):
        self._fh = open(path, "wb")
        self.rows, self.cols = rows, cols
        self.count = 0
        self._fh.write(_MLC_MAGIC + struct.pack("<IHH", 0, rows, cols))

    def append(self, grid, valid) -> None:
        g = np.asarray(grid, dtype="<f4").reshape(self.rows, self.cols, 3)
        v = np.asarray(valid, dtype=bool).reshape(self.rows, self.cols)
        self._fh.write(np.where(v[..., None], g, 0.0).astype("<f4").tobytes())
        self._fh.write(v.astype(np.uint8).tobytes())
        self.count += 1

    def close(self) -> None:
        self._fh.seek(4)
        self._fh.write(struct.pack("<I", self.count))
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_mlc(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != _MLC_MAGIC:
        raise ParseError(f"{path}: not an MLC1 file")
    n, rows, cols = struct.unpack_from("<IHH", data, 4)
    rec = rows * cols * 3 * 4 + rows * cols
    if len(data) != 12 + n * rec:
        raise ParseError(f"{path}: expected {n} records, file size mismatch")
    grids = np.empty((n, rows, cols, 3), dtype=np.float32)
    valid = np.empty((n, rows, cols), dtype=bool)
    off = 12
    for i in range(n):
        grids[i] = np.frombuffer(data, "<f4", rows * cols * 3, off).reshape(rows, cols, 3)
        off += rows * cols * 12
        valid[i] = np.frombuffer(data, np.uint8, rows * cols, off).reshape(rows, cols) != 0
        off += rows * cols
    return grids, valid
