"""Indexed triangle meshes: adjacency, normals, watertightness, Laplacian."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numpy.typing import ArrayLike
from scipy import sparse
from scipy.sparse import csgraph

from .errors import (
    DegenerateBoundsError,
    DegenerateVertexError,
    EmptyInputError,
    IsolatedVertexError,
)

DEGENERATE_AREA = 1e-12


class TriMesh:
    """Immutable triangle mesh.

    Parameters
    ----------
    vertices : array_like, shape (V, 3)
        Vertex positions.
    faces : array_like, shape (F, 3)
        Counter-clockwise vertex index triples (0-based).

    Adjacency (edges, vertex-to-face incidence, one-rings) is built lazily and
    cached; the coordinate and index arrays are read-only so a mesh can be
    shared freely.
    """

    def __init__(self, vertices: ArrayLike, faces: ArrayLike):
        v = np.array(vertices, dtype=np.float64).reshape(-1, 3)
        f = np.array(faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        v.flags.writeable = False
        f.flags.writeable = False
        self.vertices = v
        self.faces = f

    def __repr__(self):
        return f"TriMesh(V={self.n_vertices}, F={self.n_faces})"

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices: ArrayLike) -> TriMesh:
        """Same connectivity, new positions."""
        return TriMesh(vertices, self.faces)

    def flipped(self) -> TriMesh:
        """Mesh with every face orientation reversed."""
        return TriMesh(self.vertices, self.faces[:, ::-1])

    # *** adjacency ***

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges ``(E, 2)`` with ``e[:, 0] < e[:, 1]``."""
        return self._edge_data[0]

    @cached_property
    def face_edges(self) -> np.ndarray:
        """``(F, 3)`` edge ids; slot ``k`` joins corners ``k`` and ``k+1``."""
        return self._edge_data[1]

    @cached_property
    def _edge_data(self):
        f = self.faces
        he = np.stack([f, np.roll(f, -1, axis=1)], axis=-1).reshape(-1, 2)
        key = np.sort(he, axis=1)
        edges, inverse = np.unique(key, axis=0, return_inverse=True)
        return edges, inverse.reshape(-1, 3)

    @cached_property
    def edge_face_count(self) -> np.ndarray:
        return np.bincount(self.face_edges.ravel(), minlength=len(self.edges))

    @cached_property
    def edge_faces(self) -> list[list[int]]:
        """Faces incident to each edge."""
        out = [[] for _ in range(len(self.edges))]
        for fi, row in enumerate(self.face_edges):
            for e in row:
                out[e].append(fi)
        return out

    @cached_property
    def vertex_faces(self) -> list[np.ndarray]:
        """Faces incident to each vertex."""
        order = np.argsort(self.faces.ravel(), kind="stable")
        counts = np.bincount(self.faces.ravel(), minlength=self.n_vertices)
        splits = np.cumsum(counts)[:-1]
        return np.split(order // 3, splits)

    @cached_property
    def adjacency(self) -> sparse.csr_matrix:
        """Symmetric 0/1 vertex adjacency matrix."""
        e = self.edges
        n = self.n_vertices
        data = np.ones(2 * len(e))
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        return sparse.csr_matrix((data, (rows, cols)), shape=(n, n))

    @cached_property
    def one_rings(self) -> list[np.ndarray]:
        a = self.adjacency
        return [a.indices[a.indptr[i]:a.indptr[i + 1]] for i in range(self.n_vertices)]

    @cached_property
    def degree(self) -> np.ndarray:
        return np.diff(self.adjacency.indptr)

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        e = self.edges
        return np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)

    @cached_property
    def boundary_vertices(self) -> np.ndarray:
        """Boolean mask of vertices touching an edge with a single face."""
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self.edges[self.edge_face_count == 1].ravel()] = True
        return mask

    def edge_graph(self) -> sparse.csr_matrix:
        """Adjacency weighted by Euclidean edge length."""
        e = self.edges
        w = self.edge_lengths
        n = self.n_vertices
        return sparse.csr_matrix(
            (np.concatenate([w, w]), (np.concatenate([e[:, 0], e[:, 1]]),
                                     np.concatenate([e[:, 1], e[:, 0]]))),
            shape=(n, n),
        )

    # *** geometry ***

    @cached_property
    def face_normals_raw(self) -> np.ndarray:
        """Unnormalized face normals; their length is twice the face area."""
        v = self.vertices
        f = self.faces
        return np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])

    @cached_property
    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals_raw, axis=1)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def vertex_normals(mesh: TriMesh) -> np.ndarray:
    """Area-weighted unit vertex normals.

    Raises
    ------
    DegenerateVertexError
        If every face around some vertex has (near) zero area.
    """
    fn = mesh.face_normals_raw.copy()
    fn[mesh.face_areas <= DEGENERATE_AREA] = 0.0
    acc = np.zeros((mesh.n_vertices, 3))
    for k in range(3):
        np.add.at(acc, mesh.faces[:, k], fn)
    norm = np.linalg.norm(acc, axis=1)
    bad = norm <= 0.0
    if np.any(bad):
        raise DegenerateVertexError(
            f"vertex {int(np.flatnonzero(bad)[0])} has no non-degenerate incident face")
    return acc / norm[:, None]


@dataclass
class WatertightReport:
    is_closed: bool
    is_manifold: bool
    is_oriented: bool
    genus: int | None
    euler: int
    n_components: int
    boundary_edges: list[tuple[int, int]] = field(default_factory=list)
    defects: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.is_closed and self.is_manifold and self.is_oriented and not self.defects


def validate_watertight(mesh: TriMesh) -> WatertightReport:
    """Check closedness, manifoldness and orientation; never raises."""
    defects: list[str] = []
    if mesh.n_faces == 0:
        return WatertightReport(False, False, False, None, mesh.n_vertices, 0, [],
                                ["mesh has no faces"])
    counts = mesh.edge_face_count
    edges = mesh.edges
    boundary = [tuple(map(int, e)) for e in edges[counts == 1]]
    if boundary:
        defects.append(f"{len(boundary)} boundary edges")
    over = int(np.sum(counts > 2))
    if over:
        defects.append(f"{over} non-manifold edges (more than 2 faces)")
    is_closed = not boundary and not over

    # Each directed half-edge must appear at most once for a consistent orientation.
    f = mesh.faces
    he = np.stack([f, np.roll(f, -1, axis=1)], axis=-1).reshape(-1, 2)
    _, he_counts = np.unique(he, axis=0, return_counts=True)
    is_oriented = bool(np.all(he_counts == 1))
    if not is_oriented:
        defects.append(f"{int(np.sum(he_counts > 1))} half-edges repeated (inconsistent orientation)")

    # Vertex manifoldness: the faces around a vertex form one fan.
    nonmanifold_vertices = _count_split_fans(mesh)
    if nonmanifold_vertices:
        defects.append(f"{nonmanifold_vertices} non-manifold vertices")
    unused = int(np.sum(np.bincount(f.ravel(), minlength=mesh.n_vertices) == 0))
    if unused:
        defects.append(f"{unused} unreferenced vertices")
    degenerate = int(np.sum(mesh.face_areas <= DEGENERATE_AREA))
    if degenerate:
        defects.append(f"{degenerate} degenerate faces")

    is_manifold = over == 0 and nonmanifold_vertices == 0
    ncomp, _ = csgraph.connected_components(mesh.adjacency, directed=False)
    ncomp -= unused
    euler = mesh.n_vertices - len(edges) + mesh.n_faces
    genus = None
    if is_closed and is_manifold and (2 * ncomp - euler) % 2 == 0:
        genus = (2 * ncomp - euler) // 2
    return WatertightReport(is_closed, is_manifold, is_oriented, genus, euler, ncomp,
                            boundary, defects)


def _count_split_fans(mesh: TriMesh) -> int:
    """Number of vertices whose incident faces form more than one edge-connected fan."""
    f = mesh.faces
    nf = len(f)
    slot_edge = mesh.face_edges.ravel()
    order = np.argsort(slot_edge, kind="stable")
    same = slot_edge[order[1:]] == slot_edge[order[:-1]]
    s1, s2 = order[:-1][same], order[1:][same]          # slots sharing an edge
    f1, k1 = s1 // 3, s1 % 3
    f2, k2 = s2 // 3, s2 % 3
    # corner ids 3*face + slot; match the two corners that sit on the same vertex
    a1, b1 = 3 * f1 + k1, 3 * f1 + (k1 + 1) % 3
    a2, b2 = 3 * f2 + k2, 3 * f2 + (k2 + 1) % 3
    aligned = f[f1, k1] == f[f2, k2]
    rows = np.concatenate([a1, b1])
    cols = np.concatenate([np.where(aligned, a2, b2), np.where(aligned, b2, a2)])
    g = sparse.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(3 * nf, 3 * nf))
    _, label = csgraph.connected_components(g, directed=False)
    pairs = np.unique(np.stack([f.ravel(), label]), axis=1)
    fans = np.bincount(pairs[0], minlength=mesh.n_vertices)
    return int(np.sum(fans > 1))


@dataclass(frozen=True)
class Similarity:
    """Uniform scale followed by translation: ``x -> scale * x + offset``."""

    scale: float
    offset: np.ndarray

    def apply(self, x: ArrayLike) -> np.ndarray:
        return self.scale * np.asarray(x, dtype=float) + self.offset

    def invert(self, y: ArrayLike) -> np.ndarray:
        return (np.asarray(y, dtype=float) - self.offset) / self.scale


def normalize_unit_cube(mesh: TriMesh) -> tuple[TriMesh, Similarity]:
    """Center the bounding box and scale its longest side to span [-1, 1]."""
    lo, hi = mesh.bounds()
    extent = float(np.max(hi - lo))
    if not np.isfinite(extent) or extent <= 0.0:
        raise DegenerateBoundsError("bounding box has zero extent")
    scale = 2.0 / extent
    offset = -scale * 0.5 * (lo + hi)
    tf = Similarity(scale, offset)
    return mesh.with_vertices(tf.apply(mesh.vertices)), tf


class LaplacianOp:
    """Uniform (umbrella) Laplacian ``(L v)_i = mean_{j in N(i)} v_j - v_i``.

    Stored as the 0/1 adjacency and vertex degrees rather than an assembled
    weight matrix, so applying it to a constant field is exactly zero.
    """

    def __init__(self, adjacency: sparse.csr_matrix, degree: np.ndarray):
        self.adjacency = adjacency
        self.degree = np.asarray(degree, dtype=np.float64)

    @property
    def shape(self):
        return self.adjacency.shape

    def apply(self, x: ArrayLike) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        s = self.adjacency @ x
        d = self.degree if x.ndim == 1 else self.degree[:, None]
        return s / d - x

    __matmul__ = apply

    def matrix(self) -> sparse.csr_matrix:
        """Assembled sparse matrix (diagonal -1, off-diagonals 1/deg)."""
        inv = sparse.diags(1.0 / self.degree)
        return (inv @ self.adjacency - sparse.identity(self.shape[0])).tocsr()


def uniform_laplacian(mesh: TriMesh) -> LaplacianOp:
    deg = mesh.degree
    if np.any(deg == 0):
        raise IsolatedVertexError(f"vertex {int(np.flatnonzero(deg == 0)[0])} has no neighbors")
    return LaplacianOp(mesh.adjacency, deg)


class PointCloud:
    """Unordered finite 3D points (at least one)."""

    def __init__(self, points: ArrayLike):
        p = np.array(points, dtype=np.float64).reshape(-1, 3)
        if len(p) == 0:
            raise EmptyInputError("point cloud is empty")
        if not np.all(np.isfinite(p)):
            raise ValueError("point cloud has non-finite coordinates")
        p.flags.writeable = False
        self.points = p

    def __len__(self):
        return len(self.points)

    def __repr__(self):
        return f"PointCloud(n={len(self.points)})"


def as_points(x) -> np.ndarray:
    """Coordinates of a PointCloud, TriMesh or array as ``(N, 3)`` float array."""
    if isinstance(x, PointCloud):
        return x.points
    if isinstance(x, TriMesh):
        return x.vertices
    return np.asarray(x, dtype=np.float64).reshape(-1, 3)
