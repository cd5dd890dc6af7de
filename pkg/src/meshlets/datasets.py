"""Evaluation point clouds and meshlet training corpora."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse import csgraph

from .errors import EmptyResultError, MeshletError, ParamFailure
from .mesh import PointCloud, TriMesh
from .meshlet import Meshlet, MlcWriter, Pose, canonical_pose, extract_meshlet, footprint_scale

logger = logging.getLogger(__name__)

DESK_GRID = 13
DESK_SPACING = 0.025


@dataclass(frozen=True)
class NoiseSetting:
    """Keep fraction ``keep`` of the vertices and add Gaussian noise of per-axis std ``sigma``."""

    keep: float
    sigma: float
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        if not 0 < self.keep <= 1:
            raise ValueError("keep fraction must lie in (0, 1]")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")

    def with_seed(self, seed: int) -> NoiseSetting:
        return NoiseSetting(self.keep, self.sigma, seed, self.name)


S1 = NoiseSetting(0.10, 0.0150, name="S1")
S2 = NoiseSetting(0.20, 0.0225, name="S2")
S3 = NoiseSetting(0.40, 0.0300, name="S3")
SETTINGS = {"S1": S1, "S2": S2, "S3": S3}


def make_pointcloud(mesh: TriMesh | np.ndarray, s: NoiseSetting) -> PointCloud:
    """Random vertex subset of size ``round(keep * V)`` plus isotropic Gaussian noise."""
    verts = mesh.vertices if isinstance(mesh, TriMesh) else np.asarray(mesh, dtype=float)
    n = int(round(s.keep * len(verts)))
    if n < 1:
        raise EmptyResultError(f"keep fraction {s.keep} of {len(verts)} vertices selects nothing")
    rng = np.random.default_rng(s.seed)
    idx = np.sort(rng.choice(len(verts), size=n, replace=False))
    pts = verts[idx] + rng.normal(0.0, s.sigma, size=(n, 3)) if s.sigma > 0 else verts[idx].copy()
    return PointCloud(pts)


def sphere_samples(n: int, radius: float = 1.0) -> np.ndarray:
    """Near-uniform Fibonacci points on a sphere."""
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5 ** 0.5) * i
    return radius * np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], 1)


# *** analytic canonical patches ***

def lattice(grid_size: int = DESK_GRID, spacing: float = DESK_SPACING):
    """Planar cell offsets ``(mu, nu)``, each of shape ``(n, n)``."""
    offs = (np.arange(grid_size) - grid_size // 2) * spacing
    return np.meshgrid(offs, offs)


def heightfield(z: np.ndarray, grid_size: int = DESK_GRID, spacing: float = DESK_SPACING) -> np.ndarray:
    mu, nu = lattice(grid_size, spacing)
    return np.stack([mu, nu, z], axis=-1)


def quadric_grid(a: float, b: float, c: float, grid_size: int = DESK_GRID,
                 spacing: float = DESK_SPACING) -> np.ndarray:
    """``z = a mu^2 + b mu nu + c nu^2`` sampled on the planar lattice."""
    mu, nu = lattice(grid_size, spacing)
    return heightfield(a * mu ** 2 + b * mu * nu + c * nu ** 2, grid_size, spacing)


def edge_grid(dihedral_deg: float, direction: float = 0.0, offset: float = 0.0, convex: bool = True,
              grid_size: int = DESK_GRID, spacing: float = DESK_SPACING) -> np.ndarray:
    """Planar lattice folded isometrically along a line, leaving two half-planes at
    interior angle ``dihedral_deg``.

    The fold line runs perpendicular to angle ``direction`` at signed distance
    ``offset`` from the center; cells with ``s > offset`` are bent down
    (``convex``) or up. Folding preserves in-surface distances, like a
    geodesic resampling across a real crease.
    """
    mu, nu = lattice(grid_size, spacing)
    d = np.array([np.cos(direction), np.sin(direction)])
    s = mu * d[0] + nu * d[1]
    excess = np.maximum(s - offset, 0.0)
    bend = np.pi - np.radians(dihedral_deg)
    sign = -1.0 if convex else 1.0
    shrink = excess * (1.0 - np.cos(bend))
    return np.stack([mu - shrink * d[0], nu - shrink * d[1], sign * excess * np.sin(bend)], axis=-1)


def corner_grid(rotation: float = 0.0, shift=(0.0, 0.0), convex: bool = True,
                grid_size: int = DESK_GRID, spacing: float = DESK_SPACING) -> np.ndarray:
    """Cube corner seen along its diagonal (three faces meeting at right angles)."""
    mu, nu = lattice(grid_size, spacing)
    mu = mu - shift[0]
    nu = nu - shift[1]
    # orthonormal basis of the plane normal to (1, 1, 1)
    e1 = np.array([1.0, -1.0, 0.0]) / np.sqrt(2)
    e2 = np.array([1.0, 1.0, -2.0]) / np.sqrt(6)
    ca, sa = np.cos(rotation), np.sin(rotation)
    u = ca * mu - sa * nu
    v = sa * mu + ca * nu
    q = u[..., None] * e1 + v[..., None] * e2
    z = -np.sqrt(3.0) * q.max(axis=-1)
    return heightfield(z if convex else -z, grid_size, spacing)


def step_grid(height: float, width: float, direction: float = 0.0, offset: float = 0.0,
              grid_size: int = DESK_GRID, spacing: float = DESK_SPACING) -> np.ndarray:
    mu, nu = lattice(grid_size, spacing)
    s = mu * np.cos(direction) + nu * np.sin(direction)
    return heightfield(height * np.tanh((s - offset) / width), grid_size, spacing)


def canonical_grid(grid: np.ndarray) -> np.ndarray:
    """Express a full grid in its canonical frame."""
    valid = np.ones(grid.shape[:2], dtype=bool)
    _, canon = canonical_pose(Meshlet(grid, 1.0, valid, Pose.identity()))
    return canon.grid


KINDS = ("quadric", "edge", "corner", "step")


def quadric_generator(seed: int = 0, grid_size: int = DESK_GRID, spacing: float = DESK_SPACING,
                      max_curvature: float = 2.0, kinds=KINDS, weights=None):
    """Endless stream of canonical synthetic grids.

    Smooth quadrics have second-derivative coefficients within
    ``+-max_curvature``; edges bend by 0-90 degrees; corners are cube corners
    with random in-plane rotation and apex offset; steps are tanh ramps.
    Every grid is re-expressed in its canonical frame.
    """
    rng = np.random.default_rng(seed)
    kinds = tuple(kinds)
    p = None if weights is None else np.asarray(weights, float) / np.sum(weights)
    R = footprint_scale(spacing, grid_size)
    while True:
        kind = kinds[rng.choice(len(kinds), p=p)]
        if kind == "quadric":
            a, b, c = rng.uniform(-max_curvature, max_curvature, 3)
            g = quadric_grid(a, b, c, grid_size, spacing)
        elif kind == "edge":
            g = edge_grid(rng.uniform(90.0, 180.0), rng.uniform(0, 2 * np.pi),
                          rng.uniform(-0.6, 0.6) * R, bool(rng.integers(2)), grid_size, spacing)
        elif kind == "corner":
            g = corner_grid(rng.uniform(0, 2 * np.pi), rng.uniform(-0.4, 0.4, 2) * R,
                            bool(rng.integers(2)), grid_size, spacing)
        elif kind == "step":
            g = step_grid(rng.uniform(-0.3, 0.3) * R, rng.uniform(0.2, 1.0) * R,
                          rng.uniform(0, 2 * np.pi), rng.uniform(-0.5, 0.5) * R, grid_size, spacing)
        else:
            raise ValueError(f"unknown primitive kind {kind!r}")
        yield canonical_grid(g)


def synthetic_corpus(count: int, seed: int = 0, grid_size: int = DESK_GRID,
                     spacing: float = DESK_SPACING, **kw) -> tuple[np.ndarray, np.ndarray]:
    """``count`` canonical grids in unit coordinates and all-true validity masks."""
    gen = quadric_generator(seed, grid_size, spacing, **kw)
    scale = footprint_scale(spacing, grid_size)
    grids = np.stack([next(gen) for _ in range(count)]) / scale
    return grids, np.ones(grids.shape[:3], dtype=bool)


# *** corpora from meshes ***

def _interior_vertices(mesh: TriMesh, radius: float) -> np.ndarray:
    """Vertices farther than ``radius`` (edge-graph distance) from any boundary vertex."""
    b = np.flatnonzero(mesh.boundary_vertices)
    ok = mesh.degree > 0
    if len(b) == 0:
        return np.flatnonzero(ok)
    d = csgraph.dijkstra(mesh.edge_graph(), directed=False, indices=b, min_only=True,
                         limit=radius * 1.5)
    return np.flatnonzero(ok & (d > radius * 1.5))


def build_corpus(sources, out, per_scale: int = 256, scales=(1.0, 2.0, 4.0),
                 spacing: float = DESK_SPACING, grid_size: int = DESK_GRID, seed: int = 0,
                 max_stretch: float = 2.0, max_stretch_fraction: float = 0.1,
                 stats_path=None) -> dict:
    """Extract random canonical meshlets from every source at every scale into ``out`` (.mlc).

    ``sources`` are meshes or zero-argument callables returning meshes. Grids
    are stored in unit coordinates (divided by the footprint half-width).
    Returns per-source acceptance statistics (also written as JSON when
    ``stats_path`` is given).
    """
    sources = list(sources)
    if not sources:
        raise ValueError("no corpus sources")
    rng = np.random.default_rng(seed)
    scale = footprint_scale(spacing, grid_size)
    per_source = []
    with MlcWriter(out, grid_size, grid_size) as w:
        for si, src in enumerate(sources):
            mesh = src() if callable(src) else src
            row = {"source": si, "attempted": 0, "accepted": 0, "rejected_stretch": 0, "failed": 0}
            for sc in scales:
                scaled = TriMesh(mesh.vertices * sc, mesh.faces)
                # same disk that extract_meshlet parametrizes
                radius = scale * np.sqrt(2.0) + 2.0 * float(np.median(scaled.edge_lengths))
                pool = _interior_vertices(scaled, radius)
                if len(pool) == 0:
                    continue
                centers = rng.choice(pool, size=per_scale, replace=len(pool) < per_scale)
                for c in centers:
                    row["attempted"] += 1
                    try:
                        m = extract_meshlet(scaled, int(c), spacing, grid_size,
                                            max_stretch=max_stretch,
                                            max_stretch_fraction=max_stretch_fraction)
                    except ParamFailure:
                        row["rejected_stretch"] += 1
                        continue
                    except MeshletError:
                        row["failed"] += 1
                        continue
                    w.append(m.canonical_grid() / scale, m.valid)
                    row["accepted"] += 1
            if row["accepted"] == 0:
                logger.warning("source %d: every meshlet was rejected", si)
            row["acceptance_rate"] = row["accepted"] / max(row["attempted"], 1)
            per_source.append(row)
        total = w.count
    attempted = sum(r["attempted"] for r in per_source)
    stats = {"meshlets": total, "attempted": attempted,
             "acceptance_rate": total / max(attempted, 1), "sources": per_source}
    if stats_path is not None:
        Path(stats_path).write_text(json.dumps(stats, indent=2))
    return stats
