"""Triangle meshes with a separate UV topology, and per-face deformation frames.

A deformation frame maps the rest triangle onto the deformed triangle. Two
flavours are supported:

* ``FULL_JACOBIAN``: ``J = D @ inv(R)`` where ``R = [e1 | e2 | n]`` holds the
  rest edge vectors and the rest normal, and ``D`` the same for the deformed
  face. Captures stretch and shear.
* ``SCALED_ROTATION``: ``J = s * Q`` with ``s = sqrt(area_def / area_rest)``
  and ``Q`` the rotation between the rest and deformed tangent frames.

All geometry is computed in float64.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateFace, InvalidMesh, TopologyMismatch

DEGENERATE_AREA = 1e-12


class Variant(str, enum.Enum):
    FULL_JACOBIAN = "full_jacobian"
    SCALED_ROTATION = "scaled_rotation"


def _as_index_array(a, name):
    arr = np.asarray(a)
    if arr.size == 0:
        return np.zeros((0, 3), dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InvalidMesh(f"{name} must have shape (F, 3), got {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise InvalidMesh(f"{name} must contain integers")
    return arr.astype(np.int64)


def face_areas(vertices, faces):
    """Area of every triangle, shape (F,)."""
    v = vertices[faces]
    return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=-1)


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Indexed triangle mesh; ``uv_faces`` is parallel to ``faces``.

    Validation happens on construction: index ranges, UVs inside the unit
    square and no face with 3D area at or below 1e-12.
    """

    vertices: np.ndarray
    faces: np.ndarray
    uv_coords: np.ndarray
    uv_faces: np.ndarray
    areas: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        uv = np.asarray(self.uv_coords, dtype=np.float64).reshape(-1, 2)
        faces = _as_index_array(self.faces, "faces")
        uv_faces = _as_index_array(self.uv_faces, "uv_faces")

        if len(faces) != len(uv_faces):
            raise InvalidMesh(f"{len(faces)} faces but {len(uv_faces)} uv faces")
        if not np.all(np.isfinite(vertices)) or not np.all(np.isfinite(uv)):
            raise InvalidMesh("non-finite vertex or uv coordinate")
        if len(faces) and (faces.min() < 0 or faces.max() >= len(vertices)):
            raise InvalidMesh("vertex index out of range")
        if len(uv_faces) and (uv_faces.min() < 0 or uv_faces.max() >= len(uv)):
            raise InvalidMesh("uv index out of range")
        outside = np.any((uv < 0.0) | (uv > 1.0), axis=1)
        if np.any(outside):
            raise InvalidMesh(f"uv coordinate {int(np.argmax(outside))} lies outside [0,1]^2")

        areas = face_areas(vertices, faces)
        bad = np.flatnonzero(~(areas > DEGENERATE_AREA))
        if len(bad):
            raise DegenerateFace(bad[0], float(areas[bad[0]]))

        for name, value in (("vertices", vertices), ("faces", faces),
                            ("uv_coords", uv), ("uv_faces", uv_faces), ("areas", areas)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def n_faces(self):
        return len(self.faces)

    @property
    def n_vertices(self):
        return len(self.vertices)

    def centroids(self):
        return self.vertices[self.faces].mean(axis=1)

    def normals(self):
        v = self.vertices[self.faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def mean_edge_length(self):
        v = self.vertices[self.faces]
        edges = np.concatenate([v[:, 1] - v[:, 0], v[:, 2] - v[:, 1], v[:, 0] - v[:, 2]])
        return float(np.linalg.norm(edges, axis=-1).mean())

    def with_vertices(self, vertices):
        """Same topology and UVs, new 3D positions."""
        return TriMesh(vertices, self.faces, self.uv_coords, self.uv_faces)


@dataclass(frozen=True)
class MeshPair:
    rest: TriMesh
    deformed: TriMesh


@dataclass(frozen=True)
class FaceFrame:
    jacobian: np.ndarray
    translation: np.ndarray
    variant: Variant


def load_pair(rest_mesh, deformed_mesh):
    """Cross-check that two meshes share topology and UVs."""
    if rest_mesh.n_vertices != deformed_mesh.n_vertices:
        raise TopologyMismatch(
            f"vertex count differs: {rest_mesh.n_vertices} vs {deformed_mesh.n_vertices}")
    if rest_mesh.n_faces != deformed_mesh.n_faces:
        raise TopologyMismatch(
            f"face count differs: {rest_mesh.n_faces} vs {deformed_mesh.n_faces}")
    if len(rest_mesh.uv_coords) != len(deformed_mesh.uv_coords):
        raise TopologyMismatch("uv coordinate count differs")
    if not np.array_equal(rest_mesh.faces, deformed_mesh.faces):
        raise TopologyMismatch("face connectivity differs")
    if not np.array_equal(rest_mesh.uv_faces, deformed_mesh.uv_faces):
        raise TopologyMismatch("uv connectivity differs")
    if not np.array_equal(rest_mesh.uv_coords, deformed_mesh.uv_coords):
        raise TopologyMismatch("uv coordinates differ")
    return MeshPair(rest_mesh, deformed_mesh)


def _edge_frames(vertices, faces, normal_scaling):
    v = vertices[faces]
    e1 = v[:, 1] - v[:, 0]
    e2 = v[:, 2] - v[:, 0]
    cross = np.cross(e1, e2)
    norm = np.linalg.norm(cross, axis=-1, keepdims=True)
    if normal_scaling == "unit":
        n = cross / norm
    elif normal_scaling == "sqrt_area":
        # Sumner-Popovic style fourth vertex: cross / sqrt(|cross|)
        n = cross / np.sqrt(norm)
    else:
        raise ValueError(f"unknown normal_scaling {normal_scaling!r}")
    return np.stack([e1, e2, n], axis=-1), cross, norm[:, 0]


def _tangent_frames(vertices, faces):
    v = vertices[faces]
    e1 = v[:, 1] - v[:, 0]
    e2 = v[:, 2] - v[:, 0]
    t = e1 / np.linalg.norm(e1, axis=-1, keepdims=True)
    n = np.cross(e1, e2)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    b = np.cross(n, t)
    return np.stack([t, b, n], axis=-1)


def frame_arrays(pair, variant=Variant.FULL_JACOBIAN, normal_scaling="unit"):
    """Vectorised frames for every face: ``(J, T)`` with shapes (F,3,3), (F,3)."""
    variant = Variant(variant)
    rest, deformed = pair.rest, pair.deformed
    for mesh, which in ((rest, "rest"), (deformed, "deformed")):
        bad = np.flatnonzero(~(mesh.areas > DEGENERATE_AREA))
        if len(bad):
            raise DegenerateFace(bad[0], float(mesh.areas[bad[0]]), which)

    translation = deformed.centroids()
    if variant is Variant.FULL_JACOBIAN:
        r, _, _ = _edge_frames(rest.vertices, rest.faces, normal_scaling)
        d, _, _ = _edge_frames(deformed.vertices, deformed.faces, normal_scaling)
        # J R = D  <=>  R^T J^T = D^T
        jac = np.swapaxes(np.linalg.solve(np.swapaxes(r, -1, -2), np.swapaxes(d, -1, -2)), -1, -2)
    else:
        scale = np.sqrt(deformed.areas / rest.areas)
        q = _tangent_frames(deformed.vertices, deformed.faces) @ np.swapaxes(
            _tangent_frames(rest.vertices, rest.faces), -1, -2)
        jac = scale[:, None, None] * q
    return jac, translation


def face_frame(pair, face_index, variant=Variant.FULL_JACOBIAN, normal_scaling="unit"):
    """Deformation frame of a single face."""
    n_faces = pair.rest.n_faces
    if not 0 <= face_index < n_faces:
        raise IndexError(f"face index {face_index} out of range for {n_faces} faces")
    sub_faces = pair.rest.faces[face_index:face_index + 1]
    for mesh, which in ((pair.rest, "rest"), (pair.deformed, "deformed")):
        if not mesh.areas[face_index] > DEGENERATE_AREA:
            raise DegenerateFace(face_index, float(mesh.areas[face_index]), which)
    sub = MeshPair(
        _SubMesh(pair.rest.vertices, sub_faces),
        _SubMesh(pair.deformed.vertices, sub_faces),
    )
    jac, trans = frame_arrays(sub, variant, normal_scaling)
    return FaceFrame(jac[0], trans[0], Variant(variant))


class _SubMesh:
    """Minimal mesh view used to evaluate frames for a subset of faces."""

    def __init__(self, vertices, faces):
        self.vertices = vertices
        self.faces = faces
        self.areas = face_areas(vertices, faces)

    def centroids(self):
        return self.vertices[self.faces].mean(axis=1)


def all_face_frames(pair, variant=Variant.FULL_JACOBIAN, normal_scaling="unit"):
    jac, trans = frame_arrays(pair, variant, normal_scaling)
    variant = Variant(variant)
    return [FaceFrame(j, t, variant) for j, t in zip(jac, trans)]


def stack_frames(frames):
    """List of FaceFrame -> ``(J, T)`` arrays."""
    if len(frames) == 0:
        return np.zeros((0, 3, 3)), np.zeros((0, 3))
    jac = np.stack([np.asarray(f.jacobian, dtype=np.float64) for f in frames])
    trans = np.stack([np.asarray(f.translation, dtype=np.float64) for f in frames])
    return jac, trans
