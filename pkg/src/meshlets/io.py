"""ASCII OBJ / PLY readers and writers."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import ParseError
from .mesh import PointCloud, TriMesh

_FLOAT_FMT = "%.17g"


def _suffix(path) -> str:
    ext = Path(path).suffix.lower()
    if ext not in (".obj", ".ply"):
        raise ParseError(f"unsupported mesh extension {ext!r} (expected .obj or .ply)")
    return ext


def load_mesh(path: str | os.PathLike) -> TriMesh:
    """Read a triangle mesh from ASCII ``.obj`` or ``.ply``.

    Vertex order is preserved. Any face that is not a triangle is rejected.
    """
    ext = _suffix(path)
    with open(path, "r", encoding="ascii", errors="replace") as fh:
        text = fh.read()
    v, f = _parse_obj(text) if ext == ".obj" else _parse_ply(text)
    try:
        return TriMesh(v, f)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def load_points(path: str | os.PathLike) -> PointCloud:
    """Read vertex positions (faces, if any, are ignored)."""
    ext = _suffix(path)
    with open(path, "r", encoding="ascii", errors="replace") as fh:
        text = fh.read()
    v, _ = _parse_obj(text) if ext == ".obj" else _parse_ply(text)
    return PointCloud(v)


def save_mesh(mesh: TriMesh, path: str | os.PathLike) -> None:
    ext = _suffix(path)
    if ext == ".obj":
        _write_obj(path, mesh.vertices, mesh.faces)
    else:
        write_ply(path, mesh.vertices, mesh.faces)


def save_points(points, path: str | os.PathLike, normals=None) -> None:
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, float)
    ext = _suffix(path)
    if ext == ".obj":
        _write_obj(path, pts, np.zeros((0, 3), dtype=np.int64))
    else:
        write_ply(path, pts, None, normals=normals)


def _parse_obj(text: str):
    verts = []
    faces = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if tok[0] == "v":
            if len(tok) < 4:
                raise ParseError(f"line {lineno}: vertex needs 3 coordinates")
            try:
                verts.append([float(t) for t in tok[1:4]])
            except ValueError as exc:
                raise ParseError(f"line {lineno}: bad vertex coordinate") from exc
        elif tok[0] == "f":
            if len(tok) != 4:
                raise ParseError(
                    f"line {lineno}: face with {len(tok) - 1} vertices; only triangles supported")
            idx = []
            for t in tok[1:]:
                try:
                    i = int(t.split("/")[0])
                except ValueError as exc:
                    raise ParseError(f"line {lineno}: bad face index {t!r}") from exc
                if i == 0:
                    raise ParseError(f"line {lineno}: OBJ indices are 1-based")
                idx.append(i - 1 if i > 0 else len(verts) + i)
            faces.append(idx)
    v = np.array(verts, dtype=np.float64).reshape(-1, 3)
    f = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if f.size and (f.min() < 0 or f.max() >= len(v)):
        raise ParseError("face index out of range")
    return v, f


def _parse_ply(text: str):
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic line")
    elements = []  # (name, count, [(prop_name, is_list)])
    i = 1
    fmt = None
    while True:
        if i >= len(lines):
            raise ParseError("unterminated PLY header")
        tok = lines[i].split()
        i += 1
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1] if len(tok) > 1 else None
        elif tok[0] == "element":
            if len(tok) != 3:
                raise ParseError("bad element line")
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise ParseError("property before element")
            is_list = len(tok) > 1 and tok[1] == "list"
            elements[-1][2].append((tok[-1], is_list))
        elif tok[0] == "end_header":
            break
        else:
            raise ParseError(f"unexpected header line {lines[i - 1]!r}")
    if fmt != "ascii":
        raise ParseError(f"only ASCII PLY is supported (got format {fmt!r})")

    verts = np.zeros((0, 3))
    faces = np.zeros((0, 3), dtype=np.int64)
    body = [ln for ln in lines[i:] if ln.strip()]
    pos = 0
    for name, count, props in elements:
        rows = body[pos:pos + count]
        if len(rows) != count:
            raise ParseError(f"element {name!r}: expected {count} rows, found {len(rows)}")
        pos += count
        if name == "vertex":
            names = [p for p, _ in props]
            try:
                cols = [names.index(c) for c in ("x", "y", "z")]
            except ValueError as exc:
                raise ParseError("vertex element lacks x/y/z") from exc
            try:
                data = np.array([[float(t) for t in r.split()] for r in rows], dtype=np.float64)
            except ValueError as exc:
                raise ParseError("bad vertex row") from exc
            if count and data.ndim != 2:
                raise ParseError("ragged vertex rows")
            verts = data[:, cols] if count else verts
        elif name == "face":
            out = []
            for r in rows:
                tok = r.split()
                try:
                    n = int(tok[0])
                    idx = [int(t) for t in tok[1:1 + n]]
                except (ValueError, IndexError) as exc:
                    raise ParseError("bad face row") from exc
                if n != 3 or len(idx) != 3:
                    raise ParseError(f"face with {n} vertices; only triangles supported")
                out.append(idx)
            faces = np.array(out, dtype=np.int64).reshape(-1, 3)
    if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
        raise ParseError("face index out of range")
    return verts, faces


def _write_obj(path, verts, faces):
    with open(path, "w", encoding="ascii") as fh:
        for p in verts:
            fh.write("v %s %s %s\n" % tuple(_FLOAT_FMT % c for c in p))
        for t in faces:
            fh.write("f %d %d %d\n" % (t[0] + 1, t[1] + 1, t[2] + 1))


def write_ply(path, verts, faces=None, normals=None) -> None:
    """Write an ASCII PLY; ``normals`` adds per-vertex ``nx ny nz``."""
    verts = np.asarray(verts, dtype=np.float64)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(verts)}",
             "property float x", "property float y", "property float z"]
    if normals is not None:
        lines += ["property float nx", "property float ny", "property float nz"]
    if faces is not None:
        lines += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    lines.append("end_header")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")
        data = verts if normals is None else np.hstack([verts, np.asarray(normals, float)])
        for row in data:
            fh.write(" ".join(_FLOAT_FMT % c for c in row) + "\n")
        if faces is not None:
            for t in faces:
                fh.write("3 %d %d %d\n" % tuple(t))
