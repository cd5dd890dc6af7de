"""Fitting meshlets to targets by descending on the latent through the frozen decoder."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import NonFiniteError, NoTargetsError
from .meshlet import Meshlet, Pose, footprint_scale, grid_to_vector, vector_to_grid
from .spatial import KdTree
from .vae import VaeModel, decode, decoder_vjp, encode

MAX_HALVINGS = 5


@dataclass
class FitConfig:
    steps: int = 200
    lr: float = 0.05
    tol: float = 1e-8
    latent_penalty: float = 1e-4

    def __post_init__(self):
        if self.steps <= 0 or self.lr <= 0:
            raise ValueError("steps and lr must be positive")
        if self.tol < 0 or self.latent_penalty < 0:
            raise ValueError("tol and latent_penalty must be >= 0")


def latent_objective(model: VaeModel, latents, targets, weights, penalty: float):
    """Per-row loss ``sum w |decode(l) - t|^2 + penalty |l|^2`` and its latent gradient."""
    z = np.atleast_2d(latents)
    r = decode(model, z) - targets
    loss = np.sum(weights * r * r, axis=1) + penalty * np.sum(z * z, axis=1)
    _, g = decoder_vjp(model, z, 2.0 * weights * r)
    return loss, g + 2.0 * penalty * z


def fit_latents(model: VaeModel, l0, targets, weights, cfg: FitConfig | None = None):
    """Batched latent descent; each row has its own step size and stopping state.

    A step that raises a row's loss is retried with half the step size, up to
    five times; a row whose step still fails, or whose loss drops by less
    than ``cfg.tol``, is frozen.

    Parameters
    ----------
    l0 : ndarray, shape (B, latent_dim)
    targets, weights : ndarray, shape (B, input_dim)
        Targets in the model's (unit, canonical) coordinates and per-coordinate
        weights.

    Returns
    -------
    latents : ndarray, shape (B, latent_dim)
    trace : ndarray, shape (B, steps_taken + 1)
        Loss per row after every iteration (constant once the row stops).
    """
    cfg = cfg or FitConfig()
    dt = model.dtype
    z = np.array(np.atleast_2d(l0), dtype=dt)
    t = np.asarray(targets, dtype=dt).reshape(len(z), -1)
    w = np.asarray(weights, dtype=dt).reshape(t.shape)
    if not np.all(np.isfinite(z)):
        raise NonFiniteError("initial latent is not finite")
    if np.any(w.sum(axis=1) <= 0):
        raise NoTargetsError("every row needs at least one positive weight")
    lam = cfg.latent_penalty
    loss, grad = latent_objective(model, z, t, w, lam)
    lr = np.full(len(z), cfg.lr, dtype=dt)
    active = np.ones(len(z), dtype=bool)
    trace = [loss.copy()]
    for _ in range(cfg.steps):
        rows = np.flatnonzero(active)
        if len(rows) == 0:
            break
        pending = rows
        for _attempt in range(MAX_HALVINGS + 1):
            cand = z[pending] - lr[pending, None] * grad[pending]
            cl, cg = latent_objective(model, cand, t[pending], w[pending], lam)
            if not np.all(np.isfinite(cl)):
                cl = np.where(np.isfinite(cl), cl, np.inf)
            ok = cl <= loss[pending]
            acc = pending[ok]
            dec = loss[acc] - cl[ok]
            z[acc] = cand[ok]
            loss[acc] = cl[ok]
            grad[acc] = cg[ok]
            active[acc[dec < cfg.tol]] = False
            pending = pending[~ok]
            if len(pending) == 0:
                break
            lr[pending] *= 0.5
        active[pending] = False
        trace.append(loss.copy())
    if not np.all(np.isfinite(z)):
        raise NonFiniteError("latent fit diverged")
    return z, np.stack(trace, axis=1)


def fit_latent(model: VaeModel, l0, targets, weights=None, cfg: FitConfig | None = None):
    """Fit one latent to ``targets`` (an ``(n, n, 3)`` grid or vector in unit canonical
    coordinates) with per-cell ``weights`` of shape ``(n, n)``.

    Returns ``(latent, loss_trace)``.
    """
    t = np.asarray(targets, dtype=float).reshape(1, -1)
    if weights is None:
        w = np.ones_like(t)
    else:
        w = np.asarray(weights, dtype=float)
        w = np.repeat(w.reshape(1, -1), 3, axis=1) if w.size * 3 == t.size else w.reshape(1, -1)
    z, trace = fit_latents(model, np.asarray(l0).reshape(1, -1), t, w, cfg)
    return z[0], trace[0]


def cell_targets(grid_world, points, spacing: float, tree: KdTree | None = None, radius_cells: float = 3.0):
    """Nearest point to every grid cell; cells farther than ``radius_cells * spacing`` get weight 0."""
    g = np.asarray(grid_world, dtype=float)
    flat = g.reshape(-1, 3)
    tree = tree or KdTree(points)
    d, idx = tree.nearest(flat)
    w = (d <= radius_cells * spacing).astype(float)
    return tree.points[idx].reshape(g.shape), w.reshape(g.shape[:-1])


def _meshlet_latent(model: VaeModel, m: Meshlet) -> np.ndarray:
    if m.latent is not None:
        return np.asarray(m.latent)
    scale = footprint_scale(m.spacing, m.size)
    return encode(model, grid_to_vector(m.canonical_grid() / scale, m.valid))[0]


def decoded_world_grid(model: VaeModel, latent, m: Meshlet) -> np.ndarray:
    scale = footprint_scale(m.spacing, m.size)
    return m.pose.apply(vector_to_grid(decode(model, latent).astype(float)) * scale)


def fit_meshlet_to_points(model: VaeModel, m: Meshlet, points, cfg: FitConfig | None = None) -> Meshlet:
    """Fit ``m`` to a nearby point cloud through the prior; the pose stays fixed.

    Cells are assigned their nearest point (weight 0 beyond ``3 h``) and the
    targets are expressed in the meshlet's canonical frame before fitting.
    """
    pts = np.asarray(points.points if hasattr(points, "points") else points, dtype=float)
    l0 = _meshlet_latent(model, m)
    start = decoded_world_grid(model, l0, m)
    query = np.where(m.valid[..., None], m.grid, start)
    tw, w = cell_targets(query, pts, m.spacing)
    if not w.any():
        raise NoTargetsError("no point lies within 3 grid spacings of the meshlet")
    scale = footprint_scale(m.spacing, m.size)
    tc = m.pose.apply_inverse(tw) / scale
    z, _ = fit_latent(model, l0, tc, w, cfg)
    grid = decoded_world_grid(model, z, m)
    return replace(m, grid=grid, valid=np.ones_like(m.valid), latent=z, corr_face=None, corr_bary=None)


def fit_least_squares(m: Meshlet, points, iters: int = 10) -> Meshlet:
    """Unconstrained per-vertex baseline: each grid point moves to the mean of its nearest
    observed point and the observed points that pick it as nearest (alternated)."""
    pts = np.asarray(points.points if hasattr(points, "points") else points, dtype=float)
    tree_p = KdTree(pts)
    g = np.where(m.valid[..., None], m.grid, np.nan).reshape(-1, 3)
    keep = np.isfinite(g).all(axis=1)
    x = g[keep].copy()
    for _ in range(iters):
        _, nn = tree_p.nearest(x)
        _, back = KdTree(x).nearest(pts)
        acc = pts[nn].copy()
        cnt = np.ones(len(x))
        np.add.at(acc, back, pts)
        np.add.at(cnt, back, 1.0)
        new = acc / cnt[:, None]
        if np.allclose(new, x, rtol=0, atol=1e-12):
            break
        x = new
    g[keep] = x
    return replace(m, grid=g.reshape(m.grid.shape), latent=None, corr_face=None, corr_bary=None)


def plane_meshlet(points, spacing: float, grid_size: int, center=None) -> Meshlet:
    """Flat starting meshlet on the least-squares plane of ``points``.

    The grid is centred at ``center`` (default: the centroid projected onto
    the plane) with its mu axis along the principal direction.
    """
    pts = np.asarray(points.points if hasattr(points, "points") else points, dtype=float)
    if len(pts) < 3:
        raise NoTargetsError("need at least three points to place a patch")
    mean = pts.mean(axis=0)
    _, _, vt = np.linalg.svd(pts - mean, full_matrices=False)
    e1, e2 = vt[0], vt[1]
    nrm = np.cross(e1, e2)
    rot = np.stack([e1, e2, nrm], axis=1)
    c = mean if center is None else np.asarray(center, dtype=float)
    c = c - np.dot(c - mean, nrm) * nrm
    pose = Pose(rot, c)
    half = grid_size // 2
    offs = (np.arange(grid_size) - half) * spacing
    mu, nu = np.meshgrid(offs, offs)
    flat = np.stack([mu, nu, np.zeros_like(mu)], axis=-1)
    return Meshlet(pose.apply(flat), spacing, np.ones((grid_size, grid_size), dtype=bool), pose)
