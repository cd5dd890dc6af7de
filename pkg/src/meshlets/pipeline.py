"""Alternating reconstruction: local meshlet priors, global consistency, remeshing."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from .errors import (ConfigError, CoverageImpossible, EmptyInputError, MeshletError,
                     RemeshFailure)
from .fitting import FitConfig, fit_latents
from .geodesic import coverage_counts, sample_centers_for_coverage
from .io import save_mesh
from .mesh import PointCloud, TriMesh, uniform_laplacian, validate_watertight, vertex_normals
from .meshlet import Meshlet, Pose, extract_meshlet, footprint_scale, grid_normals, write_mlc
from .remesh import external_remesh, isotropic_remesh
from .shapes import icosphere
from .spatial import KdTree, chamfer_sq, hausdorff_sym
from .vae import VaeModel, decode, encode

logger = logging.getLogger(__name__)


@dataclass
class ReconConfig:
    """Run parameters; JSON run configs use these field names."""

    spacing: float = 0.025
    grid_size: int = 13
    coverage_k: int = 3
    inner_iterations: int = 20
    consistency_rounds: int = 10
    # exit when C^m per point (mesh vertices + meshlet points) is below this many target_length^2
    consistency_threshold: float = 0.3
    mesh_step: float = 1.0
    meshlet_step: float = 1.0
    local_step: float = 0.25
    fit_steps: int = 30
    fit_lr: float = 0.05
    latent_penalty: float = 1e-4
    init: str = "laplacian"
    init_subdivisions: int = 3
    init_weight: float = 10.0
    init_iterations: int = 10
    remesher: str = "isotropic"
    remesh_iterations: int = 1
    project_k: int = 8
    init_remesh_iterations: int = 3
    target_length: float | None = None
    smoothing: float = 0.5
    convergence_tol: float = 1e-3
    max_outer: int = 10
    seed: int = 0

    def __post_init__(self):
        for k in ("grid_size", "coverage_k", "inner_iterations", "consistency_rounds", "fit_steps",
                  "init_subdivisions", "init_iterations", "remesh_iterations", "max_outer",
                  "project_k"):
            if getattr(self, k) <= 0:
                raise ConfigError(f"{k} must be positive", k)
        for k in ("spacing", "mesh_step", "meshlet_step", "fit_lr"):
            if getattr(self, k) <= 0:
                raise ConfigError(f"{k} must be positive", k)
        for k in ("consistency_threshold", "local_step", "latent_penalty", "init_weight",
                  "convergence_tol", "smoothing"):
            if getattr(self, k) < 0:
                raise ConfigError(f"{k} must be >= 0", k)
        if self.init not in ("laplacian", "sphere"):
            raise ConfigError(f"init must be 'laplacian' or 'sphere', got {self.init!r}", "init")
        if self.remesher not in ("isotropic", "external"):
            raise ConfigError(f"remesher must be 'isotropic' or 'external', got {self.remesher!r}",
                              "remesher")
        if self.grid_size % 2 != 1:
            raise ConfigError("grid_size must be odd", "grid_size")

    @property
    def edge_length(self) -> float:
        if self.target_length is not None:
            return self.target_length
        return 0.25 * footprint_scale(self.spacing, self.grid_size)

    @property
    def fit(self) -> FitConfig:
        return FitConfig(steps=self.fit_steps, lr=self.fit_lr, tol=1e-10,
                         latent_penalty=self.latent_penalty)

    @classmethod
    def from_dict(cls, d: dict) -> ReconConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        for k in d:
            if k not in names:
                raise ConfigError(f"unknown config key {k!r}", k)
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> ReconConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class MeshletSet:
    """All active meshlets as stacked arrays (one row per meshlet)."""

    spacing: float
    centers: np.ndarray          # (K,)
    grids: np.ndarray            # (K, n, n, 3) world positions
    valid: np.ndarray            # (K, n, n)
    rotations: np.ndarray        # (K, 3, 3)
    translations: np.ndarray     # (K, 3)
    latents: np.ndarray          # (K, d)
    corr_face: np.ndarray        # (K, n, n)
    corr_bary: np.ndarray        # (K, n, n, 3)

    def __len__(self):
        return len(self.centers)

    @property
    def grid_size(self) -> int:
        return self.grids.shape[1]

    @property
    def scale(self) -> float:
        return footprint_scale(self.spacing, self.grid_size)

    def points(self) -> np.ndarray:
        return self.grids[self.valid]

    def to_canonical(self, world) -> np.ndarray:
        """World ``(K, n, n, 3)`` positions into each meshlet's unit canonical frame."""
        w = np.asarray(world) - self.translations[:, None, None, :]
        return np.einsum("kij,kabi->kabj", self.rotations, w) / self.scale

    def to_world(self, unit) -> np.ndarray:
        c = np.asarray(unit, dtype=float) * self.scale
        return np.einsum("kij,kabj->kabi", self.rotations, c) + self.translations[:, None, None, :]

    def decode_grids(self, model: VaeModel, latents=None) -> np.ndarray:
        z = self.latents if latents is None else latents
        n = self.grid_size
        return self.to_world(decode(model, z).astype(float).reshape(len(z), n, n, 3))

    def meshlet(self, i: int) -> Meshlet:
        return Meshlet(self.grids[i].copy(), self.spacing, self.valid[i].copy(),
                       Pose(self.rotations[i].copy(), self.translations[i].copy()),
                       self.latents[i].copy(), self.corr_face[i].copy(), self.corr_bary[i].copy(),
                       int(self.centers[i]))

    @classmethod
    def from_meshlets(cls, ms: list[Meshlet], latents) -> MeshletSet:
        return cls(ms[0].spacing,
                   np.array([m.center for m in ms], dtype=np.int64),
                   np.stack([m.grid for m in ms]),
                   np.stack([m.valid for m in ms]),
                   np.stack([m.pose.rotation for m in ms]),
                   np.stack([m.pose.translation for m in ms]),
                   np.asarray(latents),
                   np.stack([m.corr_face for m in ms]),
                   np.stack([m.corr_bary for m in ms]))


@dataclass
class ReconState:
    mesh: TriMesh
    meshlets: MeshletSet | None = None
    cpc_history: list[float] = field(default_factory=list)
    cm_history: list[list[float]] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)
    outer: int = 0
    inner: int = 0
    remesh_ok: list[bool] = field(default_factory=list)
    coverage_min: list[int] = field(default_factory=list)
    consistency_exits: list[dict] = field(default_factory=list)
    on_event: object = None

    def emit(self, kind: str, **data):
        ev = {"event": kind, "outer": self.outer, "inner": self.inner, **data}
        self.events.append(ev)
        logger.info("%s", ev)
        if self.on_event is not None:
            self.on_event(ev)


def _points(pc) -> np.ndarray:
    pts = pc.points if isinstance(pc, PointCloud) else PointCloud(pc).points
    return pts


def cpc_value(mesh: TriMesh, pc) -> float:
    return chamfer_sq(mesh.vertices, _points(pc)).value


# *** initialization ***

def init_mesh(pc, cfg: ReconConfig | None = None) -> TriMesh:
    """Smooth genus-0 starting mesh: a sphere around the cloud pulled toward it
    under a strong penalty on the Laplacian of the displacement."""
    cfg = cfg or ReconConfig()
    pts = _points(pc)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    c = 0.5 * (lo + hi)
    r = float(np.max(np.linalg.norm(pts - c, axis=1)))
    if r <= 0:
        raise EmptyInputError("point cloud has zero extent")
    sph = icosphere(cfg.init_subdivisions)
    v0 = sph.vertices * r + c
    mesh = sph.with_vertices(v0)
    if cfg.init == "sphere":
        return mesh
    L = uniform_laplacian(mesh).matrix()
    LtL = (L.T @ L).tocsc()
    w = cfg.init_weight
    rhs_reg = w * (LtL @ v0)
    tree_p = KdTree(pts)
    v = v0.copy()
    n = len(v)
    for _ in range(cfg.init_iterations):
        _, nn = tree_p.nearest(v)
        _, back = KdTree(v).nearest(pts)
        cnt = 1.0 + np.bincount(back, minlength=n)
        b = pts[nn].copy()
        np.add.at(b, back, pts)
        A = (sparse.diags(cnt) + w * LtL).tocsc()
        v_new = spsolve(A, b + rhs_reg)
        if np.allclose(v_new, v, rtol=0, atol=1e-10 * r):
            v = v_new
            break
        v = v_new
    return mesh.with_vertices(v)


# *** correspondences ***

def _closest_on_triangles(p, A, B, C):
    """Closest points on triangles ``(A, B, C)`` to ``p`` (all ``(..., 3)``), returned
    as barycentric weights and squared distances."""
    ab, ac, ap = B - A, C - A, p - A
    n = np.cross(ab, ac)
    nn = np.sum(n * n, axis=-1)
    nn = np.where(nn > 0, nn, 1.0)
    # barycentrics of the in-plane projection
    w1 = np.sum(np.cross(ap, ac) * n, axis=-1) / nn
    w2 = np.sum(np.cross(ab, ap) * n, axis=-1) / nn
    w0 = 1 - w1 - w2
    bary = np.stack([w0, w1, w2], axis=-1)
    inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
    best_b = np.where(inside[..., None], bary, 0.0)
    proj = w0[..., None] * A + w1[..., None] * B + w2[..., None] * C
    best_d = np.where(inside, np.sum((p - proj) ** 2, axis=-1), np.inf)
    verts = (A, B, C)
    for i, j in ((0, 1), (1, 2), (2, 0)):
        P, Q = verts[i], verts[j]
        d = Q - P
        dd = np.sum(d * d, axis=-1)
        t = np.clip(np.sum((p - P) * d, axis=-1) / np.where(dd > 0, dd, 1.0), 0.0, 1.0)
        q = P + t[..., None] * d
        dist = np.sum((p - q) ** 2, axis=-1)
        better = (~inside) & (dist < best_d)
        bb = np.zeros_like(bary)
        bb[..., i] = 1 - t
        bb[..., j] = t
        best_b = np.where(better[..., None], bb, best_b)
        best_d = np.where(better, dist, best_d)
    return best_b, best_d


def surface_correspondence(mesh: TriMesh, points) -> tuple[np.ndarray, np.ndarray]:
    """Face and barycentric weights of the closest point on the one-ring triangles
    of each point's nearest vertex."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    _, nv = KdTree(mesh.vertices).nearest(pts)
    vf = mesh.vertex_faces
    width = max(len(f) for f in vf)
    table = np.full((mesh.n_vertices, width), -1, dtype=np.int64)
    for i, f in enumerate(vf):
        table[i, :len(f)] = f
    cand = table[nv]                                  # (P, width)
    ok = cand >= 0
    tri = mesh.vertices[mesh.faces[np.where(ok, cand, 0)]]  # (P, width, 3, 3)
    bary, d2 = _closest_on_triangles(pts[:, None, :], tri[..., 0, :], tri[..., 1, :], tri[..., 2, :])
    d2 = np.where(ok, d2, np.inf)
    k = np.argmin(d2, axis=1)
    rows = np.arange(len(pts))
    return cand[rows, k], bary[rows, k]


def refresh_correspondences(state: ReconState) -> None:
    ms = state.meshlets
    cells = np.where(ms.valid[..., None], ms.grids, 0.0).reshape(-1, 3)
    face, bary = surface_correspondence(state.mesh, cells)
    shape = ms.valid.shape
    ms.corr_face = np.where(ms.valid, face.reshape(shape), -1)
    ms.corr_bary = np.where(ms.valid[..., None], bary.reshape(*shape, 3), 0.0)


def _interp(mesh: TriMesh, values, face, bary):
    f = np.where(face >= 0, face, 0)
    return np.einsum("...k,...kd->...d", bary, values[mesh.faces[f]])


# *** the three phases ***

def enforce_local_priors(state: ReconState, pc, model: VaeModel, cfg: ReconConfig) -> ReconState:
    """Pull every meshlet toward the point cloud through the prior; the mesh is untouched."""
    ms = state.meshlets
    mesh = state.mesh
    res = chamfer_sq(mesh.vertices, _points(pc))
    surf = _interp(mesh, mesh.vertices, ms.corr_face, ms.corr_bary)
    grad = _interp(mesh, res.grad_a, ms.corr_face, ms.corr_bary)
    target = surf - cfg.local_step * grad
    w = (ms.valid & (ms.corr_face >= 0)).astype(float)
    K = len(ms)
    tc = ms.to_canonical(target).reshape(K, -1)
    wv = np.repeat(w[..., None], 3, axis=-1).reshape(K, -1)
    z, _ = fit_latents(model, ms.latents, np.nan_to_num(tc), wv, cfg.fit)
    ms.latents = z
    ms.grids = ms.decode_grids(model)
    return state


def cm_value(mesh: TriMesh, ms: MeshletSet) -> float:
    return chamfer_sq(mesh.vertices, ms.points()).value


def cm_threshold(state: ReconState, cfg: ReconConfig) -> float:
    """Total C^m below which the mesh and meshlets count as consistent."""
    n = state.mesh.n_vertices + int(state.meshlets.valid.sum())
    return cfg.consistency_threshold * cfg.edge_length ** 2 * n


def _mean_targets(x, y):
    """For each x_i: mean of its nearest y and the y points that pick x_i as nearest."""
    _, nxy = KdTree(y).nearest(x)
    _, nyx = KdTree(x).nearest(y)
    acc = y[nxy].copy()
    np.add.at(acc, nyx, y)
    cnt = 1.0 + np.bincount(nyx, minlength=len(x))
    return acc / cnt[:, None]


def enforce_global_consistency(state: ReconState, model: VaeModel, cfg: ReconConfig) -> ReconState:
    """Alternate mesh and meshlet updates that lower C^m until it is under the threshold."""
    ms = state.meshlets
    if ms is None or len(ms) == 0:
        raise MeshletError("global consistency needs at least one meshlet")
    thr = cm_threshold(state, cfg)
    cm = cm_value(state.mesh, ms)
    hist = [cm]
    reason = "threshold"
    for _ in range(cfg.consistency_rounds):
        if cm < thr:
            break
        start = cm
        # (a) mesh vertices toward the meshlet points, meshlets fixed
        V = state.mesh.vertices
        P = ms.points()
        # normal component only; tangential placement is left to the remesher
        nrm = vertex_normals(state.mesh)
        step = np.sum((_mean_targets(V, P) - V) * nrm, axis=1, keepdims=True) * nrm
        a = cfg.mesh_step
        for _h in range(6):
            cand = state.mesh.with_vertices(V + a * step)
            c = cm_value(cand, ms)
            if c <= cm:
                state.mesh, cm = cand, c
                break
            a *= 0.5
        # (b) meshlets toward the mesh vertices, mesh fixed
        P = ms.points()
        tgt_pts = P + cfg.meshlet_step * (_mean_targets(P, state.mesh.vertices) - P)
        tgt = np.zeros_like(ms.grids)
        tgt[ms.valid] = tgt_pts
        K = len(ms)
        tc = ms.to_canonical(tgt).reshape(K, -1)
        wv = np.repeat(ms.valid[..., None], 3, axis=-1).reshape(K, -1).astype(float)
        z_fit, _ = fit_latents(model, ms.latents, np.nan_to_num(tc), wv, cfg.fit)
        z0 = ms.latents
        grids0 = ms.grids
        a = 1.0
        for _h in range(6):
            z = z0 + a * (z_fit - z0)
            ms.grids = ms.decode_grids(model, z)
            c = cm_value(state.mesh, ms)
            if c <= cm:
                ms.latents, cm = z, c
                break
            a *= 0.5
        else:
            ms.grids = grids0
        hist.append(cm)
        if cm >= start:
            reason = "stalled"
            break
    if cm >= thr:
        if reason == "threshold":
            reason = "max_rounds"
        state.emit("no_progress", cm=cm, threshold=thr, reason=reason)
    state.cm_history.append(hist)
    state.consistency_exits.append({"cm": cm, "threshold": thr, "below": cm < thr})
    return state


def remesh(state: ReconState, cfg: ReconConfig) -> ReconState:
    """Regularize the mesh and snap it onto the meshlets; keeps the old mesh on failure."""
    ms = state.meshlets
    pts = ms.points() if ms is not None else None
    try:
        if cfg.remesher == "external":
            nrm = np.stack([grid_normals(g) for g in ms.grids])[ms.valid]
            new = external_remesh(state.mesh, pts, nrm)
        else:
            new = isotropic_remesh(state.mesh, cfg.edge_length, cfg.remesh_iterations,
                                   project_points=pts, smoothing=cfg.smoothing,
                                   project_max_dist=3 * cfg.spacing, project_k=cfg.project_k)
    except RemeshFailure as exc:
        state.emit("remesh_failure", error=str(exc))
        state.remesh_ok.append(False)
        return state
    rep = validate_watertight(new)
    if not rep.ok:
        state.emit("remesh_failure", error=str(rep.defects))
        state.remesh_ok.append(False)
        return state
    state.mesh = new
    state.remesh_ok.append(True)
    if ms is not None:
        refresh_correspondences(state)
    return state


def resample_meshlets(state: ReconState, model: VaeModel, cfg: ReconConfig) -> ReconState:
    """Replace all meshlets by fresh ones extracted from the current mesh."""
    mesh = state.mesh
    h, n = cfg.spacing, cfg.grid_size
    failed: set[int] = set()
    good: dict[int, Meshlet] = {}
    for _ in range(50):
        centers = sample_centers_for_coverage(mesh, h, cfg.coverage_k, n, seed=cfg.seed,
                                              exclude=sorted(failed), initial=sorted(good))
        new = [c for c in centers if c not in good]
        for c in new:
            try:
                good[c] = extract_meshlet(mesh, c, h, n)
            except MeshletError:
                failed.add(c)
        if all(c in good for c in centers):
            break
    else:
        raise CoverageImpossible("meshlet extraction kept failing while refilling coverage")
    order = list(centers)
    ms_list = [good[c] for c in order]
    scale = footprint_scale(h, n)
    vecs = np.stack([np.where(m.valid[..., None], m.canonical_grid() / scale, 0.0).ravel()
                     for m in ms_list])
    mu, _ = encode(model, vecs)
    state.meshlets = MeshletSet.from_meshlets(ms_list, mu)
    cov = coverage_counts(mesh, order, (n // 2) * h)
    state.coverage_min.append(int(cov.min()))
    if cov.min() < cfg.coverage_k:
        raise CoverageImpossible(f"coverage {cov.min()} < {cfg.coverage_k} after resampling")
    state.emit("resample", meshlets=len(order), failed=len(failed), coverage_min=int(cov.min()))
    return state


# *** driver ***

def _checkpoint(state: ReconState, directory: Path, gt=None, pc=None):
    directory.mkdir(parents=True, exist_ok=True)
    k = state.outer
    save_mesh(state.mesh, directory / f"mesh_{k:03d}.ply")
    ms = state.meshlets
    canon = ms.to_canonical(ms.grids)
    write_mlc(directory / f"meshlets_{k:03d}.mlc", np.nan_to_num(canon), ms.valid)
    path = directory / "metrics.csv"
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["iteration", "cpc", "cm", "hausdorff_gt"])
        cm = state.cm_history[-1][-1] if state.cm_history else float("nan")
        hd = hausdorff_sym(state.mesh.vertices, gt) if gt is not None else float("nan")
        w.writerow([k, repr(state.cpc_history[-1]), repr(cm), repr(hd)])


def reconstruct(pc, model: VaeModel, cfg: ReconConfig | None = None, gt=None,
                checkpoint_dir=None, on_event=None) -> tuple[TriMesh, ReconState]:
    """Estimate a watertight mesh from ``pc`` under the meshlet prior.

    Parameters
    ----------
    pc : PointCloud or array_like
        Observations, normalized to ``[-1, 1]^3``.
    gt : array_like, optional
        Ground-truth points; only used for the Hausdorff column of the metrics.
    checkpoint_dir : path, optional
        Receives mesh PLY, meshlet ``.mlc`` and ``metrics.csv`` after every
        outer loop.

    Returns
    -------
    mesh : TriMesh
    state : ReconState
        Final state with the full metric traces and event log.
    """
    cfg = cfg or ReconConfig()
    pts = _points(pc)
    t0 = time.perf_counter()
    mesh = init_mesh(pts, cfg)
    mesh = isotropic_remesh(mesh, cfg.edge_length, cfg.init_remesh_iterations,
                            smoothing=cfg.smoothing)
    state = ReconState(mesh, on_event=on_event)
    state.emit("init", vertices=mesh.n_vertices)
    resample_meshlets(state, model, cfg)
    state.cpc_history.append(cpc_value(state.mesh, pts))
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    for outer in range(1, cfg.max_outer + 1):
        state.outer = outer
        prev_mesh, prev_ms = state.mesh, state.meshlets
        for inner in range(cfg.inner_iterations):
            state.inner = inner
            enforce_local_priors(state, pts, model, cfg)
            enforce_global_consistency(state, model, cfg)
            remesh(state, cfg)
        state.inner = 0
        resample_meshlets(state, model, cfg)
        cpc = cpc_value(state.mesh, pts)
        prev = state.cpc_history[-1]
        state.emit("outer", cpc=cpc, vertices=state.mesh.n_vertices, meshlets=len(state.meshlets),
                   seconds=time.perf_counter() - t0)
        if cpc > prev:
            state.mesh, state.meshlets = prev_mesh, prev_ms
            state.emit("reverted", cpc=cpc, previous=prev)
            break
        state.cpc_history.append(cpc)
        if ckdir is not None:
            _checkpoint(state, ckdir, gt, pts)
        if (prev - cpc) / max(prev, 1e-300) < cfg.convergence_tol:
            break
    rep = validate_watertight(state.mesh)
    if not rep.ok:
        raise RemeshFailure(f"final mesh is not watertight: {rep.defects}")
    return state.mesh, state
