"""Local geodesic parametrization (discrete exponential map) and coverage seeding."""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np
from scipy.sparse import csgraph

from .errors import CoverageImpossible, ParamFailure
from .mesh import TriMesh


@dataclass
class GeoParam:
    """Planar (mu, nu) coordinates for the vertices around a center vertex.

    ``vertex_ids[k]`` maps to ``uv[k]``; ``faces`` index into ``vertex_ids``
    and ``face_ids`` are the corresponding faces of the source mesh.
    """

    center: int
    vertex_ids: np.ndarray
    uv: np.ndarray
    positions: np.ndarray
    faces: np.ndarray
    face_ids: np.ndarray

    @property
    def radii(self) -> np.ndarray:
        return np.linalg.norm(self.uv, axis=1)

    @property
    def max_radius(self) -> float:
        return float(self.radii.max())


def _ordered_fan(mesh: TriMesh, center: int) -> list[int]:
    """One-ring of ``center`` in counter-clockwise order, starting at the smallest id."""
    succ: dict[int, int] = {}
    for fi in mesh.vertex_faces[center]:
        tri = mesh.faces[fi]
        k = int(np.flatnonzero(tri == center)[0])
        a, b = int(tri[(k + 1) % 3]), int(tri[(k + 2) % 3])
        if a in succ:
            raise ParamFailure(f"non-manifold fan at vertex {center}")
        succ[a] = b
    if not succ:
        raise ParamFailure(f"vertex {center} has no faces")
    start = min(succ)
    ring = [start]
    while True:
        nxt = succ.get(ring[-1])
        if nxt is None:
            raise ParamFailure(f"fan around vertex {center} is open (boundary)")
        if nxt == start:
            break
        ring.append(nxt)
        if len(ring) > len(succ):
            raise ParamFailure(f"non-manifold fan at vertex {center}")
    if len(ring) != len(succ):
        raise ParamFailure(f"non-manifold fan at vertex {center}")
    return ring


def _unfold(A, B, a3, b3, q3):
    # place q next to the planar edge (A, B), to its left, preserving the 3D triangle shape
    e = b3 - a3
    el = np.linalg.norm(e)
    w = q3 - a3
    x = float(np.dot(w, e)) / el
    y = float(np.linalg.norm(np.cross(e, w))) / el
    d = B - A
    d = d / np.hypot(d[0], d[1])
    perp = np.array([-d[1], d[0]])
    return A + x * d + y * perp


def geodesic_param(mesh: TriMesh, center: int, radius: float) -> GeoParam:
    """Discrete exponential map around ``center`` out to geodesic ``radius``.

    The one-ring is laid out by polar angle, with the total angle around the
    center rescaled to 2*pi. Further vertices are placed by unfolding the
    triangle that reaches them across an already-placed edge, in order of
    increasing planar distance (Dijkstra order); the planar distance, floored
    at the straight-line distance to the center, is the geodesic distance
    estimate.

    Raises
    ------
    ParamFailure
        If the center fan is open or non-manifold, or propagation within
        ``radius`` reaches a mesh boundary.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    if not 0 <= center < mesh.n_vertices:
        raise IndexError(f"center {center} out of range")
    V = mesh.vertices
    F = mesh.faces
    vfaces = mesh.vertex_faces
    boundary = mesh.boundary_vertices
    if boundary[center]:
        raise ParamFailure(f"center {center} lies on the mesh boundary")

    ring = _ordered_fan(mesh, center)
    c = V[center]
    vecs = V[ring] - c
    lens = np.linalg.norm(vecs, axis=1)
    unit = vecs / lens[:, None]
    cosang = np.clip(np.sum(unit * np.roll(unit, -1, axis=0), axis=1), -1.0, 1.0)
    ang = np.arccos(cosang)
    theta = np.concatenate([[0.0], np.cumsum(ang)[:-1]]) * (2 * np.pi / ang.sum())

    uv: dict[int, np.ndarray] = {center: np.zeros(2)}
    for v, r, t in zip(ring, lens, theta):
        if boundary[v]:
            raise ParamFailure(f"boundary vertex {v} inside the parametrized disk")
        uv[v] = np.array([r * np.cos(t), r * np.sin(t)])

    best: dict[int, float] = {}
    cand: dict[int, np.ndarray] = {}
    heap: list[tuple[float, int]] = []

    def relax(p: int):
        for fi in vfaces[p]:
            tri = F[fi]
            unknown = [k for k in range(3) if int(tri[k]) not in uv]
            if len(unknown) != 1:
                continue
            k = unknown[0]
            q = int(tri[k])
            a, b = int(tri[(k + 1) % 3]), int(tri[(k + 2) % 3])
            Q = _unfold(uv[a], uv[b], V[a], V[b], V[q])
            r = float(np.hypot(Q[0], Q[1]))
            # unfolding across angle excess can undershoot; a geodesic is never shorter than the chord
            chord = float(np.linalg.norm(V[q] - c))
            if r < chord:
                Q = Q * (chord / r) if r > 0 else np.array([chord, 0.0])
                r = chord
            if r < best.get(q, np.inf):
                best[q] = r
                cand[q] = Q
                heapq.heappush(heap, (r, q))

    for p in [center] + ring:
        relax(p)
    while heap:
        r, q = heapq.heappop(heap)
        if q in uv or r > best[q]:
            continue
        if r > radius:
            break
        if boundary[q]:
            raise ParamFailure(f"boundary vertex {q} inside the parametrized disk")
        uv[q] = cand[q]
        relax(q)

    ids = np.fromiter(uv.keys(), dtype=np.int64, count=len(uv))
    coords = np.array([uv[i] for i in ids])
    local = {int(g): k for k, g in enumerate(ids)}
    face_ids = []
    for g in ids:
        face_ids.extend(int(f) for f in vfaces[g])
    face_ids = np.unique(np.array(face_ids, dtype=np.int64))
    inside = np.array([all(int(x) in local for x in F[f]) for f in face_ids], dtype=bool)
    face_ids = face_ids[inside]
    faces = np.array([[local[int(x)] for x in F[f]] for f in face_ids], dtype=np.int64).reshape(-1, 3)
    return GeoParam(center, ids, coords, V[ids].copy(), faces, face_ids)


def stretch_ratios(param: GeoParam) -> tuple[np.ndarray, np.ndarray]:
    """Per-face singular-value ratio of the planar-to-surface Jacobian, and planar areas.

    Folded or degenerate planar triangles get an infinite ratio.
    """
    P = param.uv[param.faces]
    X = param.positions[param.faces]
    D2 = np.stack([P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]], axis=-1)     # (M, 2, 2)
    D3 = np.stack([X[:, 1] - X[:, 0], X[:, 2] - X[:, 0]], axis=-1)     # (M, 3, 2)
    det = D2[:, 0, 0] * D2[:, 1, 1] - D2[:, 0, 1] * D2[:, 1, 0]
    area = 0.5 * np.abs(det)
    ratio = np.full(len(det), np.inf)
    ok = det > 1e-300
    if np.any(ok):
        J = D3[ok] @ np.linalg.inv(D2[ok])
        s = np.linalg.svd(J, compute_uv=False)
        with np.errstate(divide="ignore"):
            ratio[ok] = np.where(s[:, 1] > 0, s[:, 0] / s[:, 1], np.inf)
    return ratio, area


def stretch_reject(param: GeoParam, max_ratio: float = 2.0, max_fraction: float = 0.1) -> bool:
    """True when more than ``max_fraction`` of the planar area is stretched beyond ``max_ratio``."""
    ratio, area = stretch_ratios(param)
    total = area.sum()
    if total <= 0:
        return True
    return bool(area[ratio > max_ratio].sum() / total > max_fraction)


def coverage_counts(mesh: TriMesh, centers, radius: float) -> np.ndarray:
    """Number of centers within edge-graph geodesic ``radius`` of each vertex."""
    counts = np.zeros(mesh.n_vertices, dtype=np.int64)
    centers = np.asarray(list(centers), dtype=np.int64)
    if len(centers) == 0:
        return counts
    graph = mesh.edge_graph()
    for s in range(0, len(centers), 256):
        d = csgraph.dijkstra(graph, directed=False, indices=centers[s:s + 256], limit=radius * (1 + 1e-12))
        counts += np.sum(d <= radius, axis=0)
    return counts


def sample_centers_for_coverage(mesh: TriMesh, spacing: float, k: int = 3, grid_size: int = 31,
                                seed: int = 0, exclude=(), initial=()) -> list[int]:
    """Choose meshlet centers so every vertex lies within ``(grid_size // 2) * spacing``
    (edge-graph geodesic distance) of at least ``k`` distinct centers.

    Farthest-point seeding first; later passes add centers near the least
    covered vertices. ``exclude`` lists vertices that may not be centers and
    ``initial`` lists centers already in use.
    """
    if k < 1:
        raise ValueError("coverage k must be >= 1")
    n = mesh.n_vertices
    radius = (grid_size // 2) * spacing
    graph = mesh.edge_graph()
    rng = np.random.default_rng(seed)
    eligible = ~mesh.boundary_vertices & (mesh.degree > 0)
    eligible[np.asarray(list(exclude), dtype=np.int64)] = False
    if not eligible.any():
        raise CoverageImpossible("no vertex can host a meshlet")
    limit = 4.0 * radius
    cover = np.zeros(n, dtype=np.int64)
    dist = np.full(n, np.inf)
    centers: list[int] = []
    is_center = np.zeros(n, dtype=bool)

    def add(cidx):
        nonlocal dist
        d = csgraph.dijkstra(graph, directed=False, indices=cidx, limit=limit)
        cover[d <= radius] += 1
        dist = np.minimum(dist, d)
        centers.append(int(cidx))
        is_center[cidx] = True

    init = np.asarray(list(initial), dtype=np.int64)
    for s in range(0, len(init), 256):
        # chunked multi-source runs; same result as adding them one by one
        d = csgraph.dijkstra(graph, directed=False, indices=init[s:s + 256], limit=limit)
        cover += np.sum(d <= radius, axis=0)
        dist = np.minimum(dist, d.min(axis=0))
    centers.extend(int(c) for c in init)
    is_center[init] = True
    if not centers:
        add(int(rng.choice(np.flatnonzero(eligible))))

    for level in range(1, k + 1):
        while True:
            under = np.flatnonzero(cover < level)
            if len(under) == 0:
                break
            # farthest under-covered vertex from existing centers; argmax keeps the smallest index
            u = int(under[np.argmax(dist[under])])
            if eligible[u] and not is_center[u]:
                add(u)
                continue
            d = csgraph.dijkstra(graph, directed=False, indices=u, limit=radius * (1 + 1e-12))
            pool = np.flatnonzero((d <= radius) & eligible & ~is_center)
            if len(pool) == 0:
                raise CoverageImpossible(
                    f"vertex {u} cannot reach {level} distinct centers within radius {radius:g}")
            add(int(pool[np.argmax(dist[pool])]))
    return centers
