"""Procedural test meshes (all counter-clockwise, outward-facing)."""

from __future__ import annotations

import numpy as np

from .mesh import TriMesh


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriMesh:
    """Subdivided icosahedron projected onto a sphere (V = 10 * 4**s + 2)."""
    t = (1.0 + 5 ** 0.5) / 2.0
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
         (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
         (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
         (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
         (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
         (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, dtype=float) / np.linalg.norm(p) for p in v]
    faces = f
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                p = verts[a] + verts[b]
                verts.append(p / np.linalg.norm(p))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return TriMesh(np.array(verts) * radius, faces)


def plane_grid(nx: int, ny: int, spacing: float = 1.0, center: bool = True) -> TriMesh:
    """Regular ``nx`` x ``ny`` vertex lattice in the z=0 plane, normals +z."""
    xs = np.arange(nx) * spacing
    ys = np.arange(ny) * spacing
    if center:
        xs = xs - xs.mean()
        ys = ys - ys.mean()
    gx, gy = np.meshgrid(xs, ys)
    verts = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)
    idx = np.arange(nx * ny).reshape(ny, nx)
    a = idx[:-1, :-1].ravel()
    b = idx[:-1, 1:].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[1:, :-1].ravel()
    faces = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    return TriMesh(verts, faces)


def cylinder(radius: float = 1.0, height: float = 4.0, n_around: int = 128,
             n_height: int = 64) -> TriMesh:
    """Open cylinder barrel around the z axis (two boundary loops)."""
    theta = np.arange(n_around) * 2 * np.pi / n_around
    zs = np.linspace(-height / 2, height / 2, n_height)
    verts = np.array([(radius * np.cos(t), radius * np.sin(t), z) for z in zs for t in theta])
    faces = []
    for j in range(n_height - 1):
        for i in range(n_around):
            a = j * n_around + i
            b = j * n_around + (i + 1) % n_around
            c = b + n_around
            d = a + n_around
            faces += [(a, b, c), (a, c, d)]
    return TriMesh(verts, faces)


def torus(major: float = 1.0, minor: float = 0.35, n_major: int = 48,
          n_minor: int = 24) -> TriMesh:
    u = np.arange(n_major) * 2 * np.pi / n_major
    w = np.arange(n_minor) * 2 * np.pi / n_minor
    verts = []
    for a in u:
        for b in w:
            r = major + minor * np.cos(b)
            verts.append((r * np.cos(a), r * np.sin(a), minor * np.sin(b)))
    faces = []
    for i in range(n_major):
        for j in range(n_minor):
            p = i * n_minor + j
            q = ((i + 1) % n_major) * n_minor + j
            r = ((i + 1) % n_major) * n_minor + (j + 1) % n_minor
            s = i * n_minor + (j + 1) % n_minor
            faces += [(p, q, r), (p, r, s)]
    return TriMesh(np.array(verts), faces)


def cube(n: int = 10, half: float = 1.0) -> TriMesh:
    """Closed axis-aligned cube ``[-half, half]^3`` with ``n`` x ``n`` quads per side."""
    verts: list[tuple[float, float, float]] = []
    index: dict[tuple[int, int, int], int] = {}

    def vid(i, j, k):
        key = (i, j, k)
        if key not in index:
            index[key] = len(verts)
            verts.append(tuple(-half + 2 * half * c / n for c in key))
        return index[key]

    faces = []
    for axis in range(3):
        for side in (0, n):
            u_ax, v_ax = [a for a in range(3) if a != axis]
            for a in range(n):
                for b in range(n):
                    quad = []
                    for du, dv in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        c = [0, 0, 0]
                        c[axis] = side
                        c[u_ax] = a + du
                        c[v_ax] = b + dv
                        quad.append(vid(*c))
                    p, q, r, s = quad
                    # (u, v, axis) is right-handed for axis 0, 2 and left-handed for 1
                    outward = (side == n) == (axis != 1)
                    if outward:
                        faces += [(p, q, r), (p, r, s)]
                    else:
                        faces += [(p, r, q), (p, s, r)]
    return TriMesh(np.array(verts), faces)


BUILTIN = {
    "icosphere3": lambda: icosphere(3),
    "icosphere4": lambda: icosphere(4),
    "cube": lambda: cube(24),
    "torus": torus,
}
