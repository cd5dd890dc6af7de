"""Topology-preserving isotropic remeshing (split / collapse / flip / relax / project)."""

from __future__ import annotations

import logging
import os
import subprocess
import tempfile
from pathlib import Path

import numpy as np

from .errors import RemeshFailure
from .io import load_mesh, write_ply
from .mesh import TriMesh, validate_watertight, vertex_normals
from .spatial import KdTree

logger = logging.getLogger(__name__)

EXT_REMESHER_ENV = "MESHLET_EXT_REMESHER"
_MAX_VALENCE = 12
_MIN_COS = 0.2


def _unit(v):
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


class _Editable:
    """Face list with vertex->face incidence sets, for local edits on closed manifolds."""

    def __init__(self, mesh: TriMesh):
        self.V = [p for p in np.array(mesh.vertices, dtype=float)]
        self.F = [list(map(int, f)) for f in mesh.faces]
        self.alive_f = [True] * len(self.F)
        self.vf: list[set[int]] = [set() for _ in self.V]
        for fi, f in enumerate(self.F):
            for v in f:
                self.vf[v].add(fi)
        self.alive_v = [True] * len(self.V)
        self.n_ops = 0

    # queries

    def edge_faces(self, a, b):
        return self.vf[a] & self.vf[b]

    def neighbors(self, a) -> set[int]:
        out = set()
        for fi in self.vf[a]:
            out.update(self.F[fi])
        out.discard(a)
        return out

    def valence(self, a) -> int:
        return len(self.vf[a])  # equals the neighbour count on a closed manifold

    def opposite(self, fi, a, b) -> int:
        f = self.F[fi]
        for v in f:
            if v != a and v != b:
                return v
        raise RemeshFailure("degenerate face during remeshing")

    def oriented(self, fi, a, b) -> bool:
        """True if the face traverses a -> b."""
        f = self.F[fi]
        k = f.index(a)
        return f[(k + 1) % 3] == b

    def normal(self, f, pos=None):
        P = [self.V[v] if pos is None or v not in pos else pos[v] for v in f]
        return np.cross(P[1] - P[0], P[2] - P[0])

    def edges(self):
        F = np.array([f for f, ok in zip(self.F, self.alive_f) if ok], dtype=np.int64)
        e = np.sort(np.concatenate([F[:, [0, 1]], F[:, [1, 2]], F[:, [2, 0]]]), axis=1)
        return np.unique(e, axis=0)

    def length(self, a, b):
        return float(np.linalg.norm(self.V[a] - self.V[b]))

    # edits

    def _add_face(self, f):
        self.F.append(list(f))
        self.alive_f.append(True)
        fi = len(self.F) - 1
        for v in f:
            self.vf[v].add(fi)
        return fi

    def _set_face(self, fi, f):
        for v in self.F[fi]:
            self.vf[v].discard(fi)
        self.F[fi] = list(f)
        for v in f:
            self.vf[v].add(fi)

    def _kill_face(self, fi):
        for v in self.F[fi]:
            self.vf[v].discard(fi)
        self.alive_f[fi] = False

    def split(self, a, b) -> bool:
        fs = self.edge_faces(a, b)
        if len(fs) != 2:
            return False
        f1, f2 = fs
        if not self.oriented(f1, a, b):
            f1, f2 = f2, f1
        c = self.opposite(f1, a, b)
        d = self.opposite(f2, a, b)
        m = len(self.V)
        self.V.append(0.5 * (self.V[a] + self.V[b]))
        self.vf.append(set())
        self.alive_v.append(True)
        # f1 = (a, b, c), f2 = (b, a, d)
        self._set_face(f1, (a, m, c))
        self._add_face((m, b, c))
        self._set_face(f2, (b, m, d))
        self._add_face((m, a, d))
        self.n_ops += 1
        return True

    def collapse(self, a, b, hi) -> bool:
        """Merge ``a`` into ``b`` at the edge midpoint, if that keeps the mesh a valid manifold."""
        fs = self.edge_faces(a, b)
        if len(fs) != 2:
            return False
        opp = {self.opposite(fi, a, b) for fi in fs}
        na, nb = self.neighbors(a), self.neighbors(b)
        if (na & nb) != opp or len(opp) != 2:
            return False
        if any(self.valence(c) <= 3 for c in opp):
            return False
        if self.valence(a) + self.valence(b) - 4 > _MAX_VALENCE:
            return False
        if len(na | nb) <= 4:
            return False
        p = 0.5 * (self.V[a] + self.V[b])
        for v in (na | nb) - {a, b}:
            if np.linalg.norm(self.V[v] - p) > hi:
                return False
        pos = {a: p, b: p}
        for fi in (self.vf[a] | self.vf[b]) - fs:
            f = self.F[fi]
            n0 = self.normal(f)
            n1 = self.normal(f, pos)
            l0, l1 = np.linalg.norm(n0), np.linalg.norm(n1)
            if l1 <= 1e-14 * max(l0, 1e-300) or np.dot(n0, n1) <= _MIN_COS * l0 * l1:
                return False
        for fi in list(fs):
            self._kill_face(fi)
        for fi in list(self.vf[a]):
            f = [b if v == a else v for v in self.F[fi]]
            self._set_face(fi, f)
        self.V[b] = p
        self.alive_v[a] = False
        self.n_ops += 1
        return True

    def flip(self, a, b) -> bool:
        fs = self.edge_faces(a, b)
        if len(fs) != 2:
            return False
        f1, f2 = fs
        if not self.oriented(f1, a, b):
            f1, f2 = f2, f1
        c = self.opposite(f1, a, b)
        d = self.opposite(f2, a, b)
        if c == d or d in self.neighbors(c):
            return False
        va, vb, vc, vd = (self.valence(x) for x in (a, b, c, d))
        if va <= 3 or vb <= 3:
            return False
        before = (va - 6) ** 2 + (vb - 6) ** 2 + (vc - 6) ** 2 + (vd - 6) ** 2
        after = (va - 7) ** 2 + (vb - 7) ** 2 + (vc - 5) ** 2 + (vd - 5) ** 2
        if after >= before:
            return False
        # quad a, d, b, c (counter-clockwise) re-split along c-d
        t1, t2 = (a, d, c), (d, b, c)
        ref = self.normal(self.F[f1]) + self.normal(self.F[f2])
        for t in (t1, t2):
            n = self.normal(t)
            if np.dot(n, ref) <= _MIN_COS * np.linalg.norm(n) * np.linalg.norm(ref):
                return False
        self._set_face(f1, t1)
        self._set_face(f2, t2)
        self.n_ops += 1
        return True

    def to_mesh(self) -> TriMesh:
        keep = np.flatnonzero(self.alive_v)
        remap = -np.ones(len(self.V), dtype=np.int64)
        remap[keep] = np.arange(len(keep))
        F = np.array([f for f, ok in zip(self.F, self.alive_f) if ok], dtype=np.int64)
        return TriMesh(np.array(self.V)[keep], remap[F])


def _split_long(ed: _Editable, hi: float, rounds: int = 4):
    for _ in range(rounds):
        E = ed.edges()
        V = np.array(ed.V)
        L = np.linalg.norm(V[E[:, 0]] - V[E[:, 1]], axis=1)
        cand = np.flatnonzero(L > hi)
        if len(cand) == 0:
            return
        for i in cand[np.argsort(-L[cand], kind="stable")]:
            a, b = int(E[i, 0]), int(E[i, 1])
            if ed.length(a, b) > hi:
                ed.split(a, b)


def _collapse_short(ed: _Editable, lo: float, hi: float, rounds: int = 4):
    for _ in range(rounds):
        E = ed.edges()
        V = np.array(ed.V)
        L = np.linalg.norm(V[E[:, 0]] - V[E[:, 1]], axis=1)
        cand = np.flatnonzero(L < lo)
        if len(cand) == 0:
            return
        done = 0
        for i in cand[np.argsort(L[cand], kind="stable")]:
            a, b = int(E[i, 0]), int(E[i, 1])
            if not (ed.alive_v[a] and ed.alive_v[b]) or ed.length(a, b) >= lo:
                continue
            done += ed.collapse(a, b, hi)
        if done == 0:
            return


def _equalize_valences(ed: _Editable):
    for a, b in ed.edges():
        ed.flip(int(a), int(b))


def tangential_smooth(mesh: TriMesh, weight: float = 0.5) -> TriMesh:
    """Move each vertex toward its neighbour centroid, within its tangent plane."""
    V = mesh.vertices
    A = mesh.adjacency
    cent = (A @ V) / mesh.degree[:, None]
    n = vertex_normals(mesh)
    d = cent - V
    d -= np.sum(d * n, axis=1, keepdims=True) * n
    return mesh.with_vertices(V + weight * d)


def project_to_points(mesh: TriMesh, points, max_dist: float | None = None, k: int = 1) -> TriMesh:
    """Move every vertex along its normal onto the tangent plane through its nearest
    target point; with ``k > 1`` the normal offsets of the ``k`` nearest targets are averaged."""
    tree = points if isinstance(points, KdTree) else KdTree(points)
    V = mesh.vertices
    n = vertex_normals(mesh)
    if k == 1:
        dist, idx = tree.nearest(V)
        off = np.sum((tree.points[idx] - V) * n, axis=1)
    else:
        dist, idx = tree._tree.query(V, k=min(k, len(tree)))
        dist = dist[:, 0]
        off = np.mean(np.sum((tree.points[idx] - V[:, None]) * n[:, None], axis=-1), axis=1)
    if max_dist is not None:
        off = np.where(dist <= max_dist, off, 0.0)
    return mesh.with_vertices(V + off[:, None] * n)


def isotropic_remesh(mesh: TriMesh, target_length: float, iterations: int = 3,
                     project_points=None, smoothing: float = 0.5,
                     project_max_dist: float | None = None, project_k: int = 1) -> TriMesh:
    """Drive edge lengths toward ``target_length`` without changing topology.

    Each iteration splits edges longer than 4/3 of the target, collapses
    edges shorter than 4/5 of it, flips edges to pull valences toward 6,
    relaxes vertices tangentially and, if ``project_points`` is given,
    projects vertices along their normals onto the nearest of those points
    (averaging the offsets of the ``project_k`` nearest).

    Raises
    ------
    RemeshFailure
        If the result is not a closed, oriented manifold of the input's genus.
    """
    if target_length <= 0:
        raise ValueError("target_length must be positive")
    before = validate_watertight(mesh)
    if not before.ok:
        raise RemeshFailure(f"input mesh is not watertight: {before.defects}")
    hi = 4.0 / 3.0 * target_length
    lo = 4.0 / 5.0 * target_length
    tree = None
    if project_points is not None:
        tree = project_points if isinstance(project_points, KdTree) else KdTree(project_points)
    cur = mesh
    for _ in range(iterations):
        ed = _Editable(cur)
        _split_long(ed, hi)
        _collapse_short(ed, lo, hi)
        _equalize_valences(ed)
        cur = ed.to_mesh()
        cur = tangential_smooth(cur, smoothing)
        if tree is not None:
            cur = project_to_points(cur, tree, project_max_dist, project_k)
    after = validate_watertight(cur)
    if not after.ok or after.genus != before.genus:
        raise RemeshFailure(f"remeshing broke the manifold: {after.defects}, genus {after.genus}")
    return cur


def edge_set(mesh: TriMesh) -> set[tuple[int, int]]:
    return set(map(tuple, mesh.edges.tolist()))


def external_remesh(mesh: TriMesh, points, normals, exe: str | None = None,
                    timeout: float = 600.0) -> TriMesh:
    """Run an external surface reconstruction tool: ``exe in.ply out.ply``.

    ``in.ply`` holds the oriented points (x, y, z, nx, ny, nz); the tool must
    write a watertight triangle mesh to ``out.ply``.
    """
    exe = exe or os.environ.get(EXT_REMESHER_ENV)
    if not exe:
        raise RemeshFailure(f"no external remesher configured (set {EXT_REMESHER_ENV})")
    with tempfile.TemporaryDirectory() as tmp:
        src = Path(tmp) / "in.ply"
        dst = Path(tmp) / "out.ply"
        write_ply(src, np.asarray(points, float), normals=np.asarray(normals, float))
        proc = subprocess.run([exe, str(src), str(dst)], capture_output=True, text=True, timeout=timeout)
        if proc.returncode != 0 or not dst.exists():
            raise RemeshFailure(f"external remesher failed ({proc.returncode}): {proc.stderr.strip()}")
        out = load_mesh(dst)
    rep = validate_watertight(out)
    if not rep.ok:
        raise RemeshFailure(f"external remesher returned a non-watertight mesh: {rep.defects}")
    return out
