"""Wavefront OBJ reading and writing for meshes with texture coordinates."""

from __future__ import annotations

import numpy as np

from .errors import MissingUV, ParseError
from .mesh import TriMesh


def _floats(parts, count, lineno, what):
    try:
        vals = [float(p) for p in parts[:count]]
    except ValueError:
        raise ParseError(f"bad number in {what}", lineno) from None
    if len(vals) < count:
        raise ParseError(f"{what} needs {count} values", lineno)
    return vals


def _index(token, n, lineno, what):
    try:
        k = int(token)
    except ValueError:
        raise ParseError(f"bad {what} index {token!r}", lineno) from None
    if k < 0:
        k += n + 1  # relative index
    if not 1 <= k <= n:
        raise ParseError(f"{what} index {token} out of range (have {n})", lineno)
    return k - 1


def parse_obj_text(text, name="<string>"):
    """Parse OBJ source; n-gons become fans ``(0, k, k+1)``."""
    verts, uvs, faces, uv_faces = [], [], [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tag, *parts = line.split()
        if tag == "v":
            verts.append(_floats(parts, 3, lineno, "vertex"))
        elif tag == "vt":
            uvs.append(_floats(parts, 2, lineno, "texture coordinate"))
        elif tag == "f":
            if len(parts) < 3:
                raise ParseError("face needs at least 3 corners", lineno)
            corner_v, corner_t = [], []
            for token in parts:
                fields = token.split("/")
                if len(fields) < 2 or fields[1] == "":
                    raise MissingUV(f"face corner {token!r} has no texture coordinate", lineno)
                corner_v.append(_index(fields[0], len(verts), lineno, "vertex"))
                corner_t.append(_index(fields[1], len(uvs), lineno, "texture coordinate"))
            for k in range(1, len(parts) - 1):
                faces.append([corner_v[0], corner_v[k], corner_v[k + 1]])
                uv_faces.append([corner_t[0], corner_t[k], corner_t[k + 1]])
        # vn, g, o, s, usemtl, mtllib and other statements carry nothing we use
    if not faces:
        raise ParseError(f"{name}: no faces")
    return TriMesh(np.array(verts), np.array(faces), np.array(uvs), np.array(uv_faces))


def parse_obj(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: not a text file ({exc})") from None
    return parse_obj_text(text, str(path))


def write_obj(mesh, path):
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"vt {u!r} {v!r}" for u, v in mesh.uv_coords.tolist()]
    for f, t in zip(mesh.faces.tolist(), mesh.uv_faces.tolist()):
        lines.append("f " + " ".join(f"{a + 1}/{b + 1}" for a, b in zip(f, t)))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
