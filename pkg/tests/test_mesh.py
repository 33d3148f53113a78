import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from texrig import fixtures
from texrig.errors import DegenerateFace, InvalidMesh, TopologyMismatch
from texrig.mesh import (TriMesh, Variant, all_face_frames, face_frame, frame_arrays, load_pair,
                         stack_frames)


def cube():
    v = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    faces = [t for a, b, c, d in quads for t in ((a, b, c), (a, c, d))]
    uv = np.array([[0.1, 0.1], [0.9, 0.1], [0.9, 0.9], [0.1, 0.9]])
    uv_faces = [(0, 1, 2), (0, 2, 3)] * 6
    return TriMesh(v, faces, uv, uv_faces)


def tetrahedron():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    faces = [(0, 2, 1), (0, 1, 3), (0, 3, 2), (1, 2, 3)]
    return TriMesh(v, faces, [[0, 0], [1, 0], [0, 1]], [(0, 1, 2)] * 4)


deformations = st.builds(
    lambda seed: np.random.default_rng(seed).normal(0, 0.2, (8, 3)),
    st.integers(0, 2 ** 32 - 1))


class TestTriMesh:
    def test_rejects_uv_outside_unit_square(self):
        with pytest.raises(InvalidMesh):
            TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]], [[0, 0], [1.2, 0], [0, 1]],
                    [[0, 1, 2]])

    def test_rejects_index_out_of_range(self):
        with pytest.raises(InvalidMesh):
            TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 3]], [[0, 0], [1, 0], [0, 1]],
                    [[0, 1, 2]])

    def test_rejects_mismatched_face_lists(self):
        with pytest.raises(InvalidMesh):
            TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]], [[0, 0], [1, 0], [0, 1]], [])

    def test_degenerate_face_reports_index(self):
        v = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0]]
        with pytest.raises(DegenerateFace) as err:
            TriMesh(v, [[0, 1, 2], [0, 1, 3]], [[0, 0], [1, 0], [0, 1]], [[0, 1, 2]] * 2)
        assert err.value.face_index == 1

    def test_arrays_are_read_only(self):
        m = cube()
        with pytest.raises(ValueError):
            m.vertices[0, 0] = 5.0


class TestLoadPair:
    def test_same_cube(self):
        pair = load_pair(cube(), cube())
        assert pair.rest.n_faces == 12

    def test_moved_vertex_keeps_topology(self):
        c = cube()
        v = c.vertices.copy()
        v[7] += [0.2, 0.1, -0.1]
        load_pair(c, c.with_vertices(v))

    def test_count_mismatch(self):
        with pytest.raises(TopologyMismatch):
            load_pair(cube(), tetrahedron())

    def test_connectivity_mismatch(self):
        c = cube()
        faces = c.faces.copy()
        faces[0] = faces[0][[0, 2, 1]]
        with pytest.raises(TopologyMismatch):
            load_pair(c, TriMesh(c.vertices, faces, c.uv_coords, c.uv_faces))


class TestFaceFrame:
    @pytest.mark.parametrize("variant", list(Variant))
    def test_identity(self, variant):
        c = cube()
        for i in range(c.n_faces):
            fr = face_frame(load_pair(c, c), i, variant)
            np.testing.assert_allclose(fr.jacobian, np.eye(3), atol=1e-12)
            np.testing.assert_array_equal(fr.translation, c.vertices[c.faces[i]].mean(axis=0))
            assert fr.variant is variant

    def test_scaled_rotation_uniform_scale(self):
        c = cube()
        frames = all_face_frames(load_pair(c, c.with_vertices(2.0 * c.vertices)),
                                 Variant.SCALED_ROTATION)
        # independent scale from the area ratio
        areas = [0.5 * np.linalg.norm(np.cross(*(c.vertices[f[1:]] - c.vertices[f[0]])))
                 for f in c.faces]
        for fr, a in zip(frames, areas):
            assert np.isclose(np.sqrt(4 * a / a), 2.0)
            np.testing.assert_allclose(fr.jacobian, 2 * np.eye(3), atol=1e-12)

    def test_rigid_motion_recovered_exactly(self):
        sphere = fixtures.uv_sphere()
        q = Rotation.from_rotvec([0.3, -1.1, 0.4]).as_matrix()
        moved = fixtures.affine_mesh(sphere, q, [1.0, 2.0, -0.5])
        for variant in Variant:
            jac, _ = frame_arrays(load_pair(sphere, moved), variant)
            np.testing.assert_allclose(jac, np.broadcast_to(q, jac.shape), atol=1e-12)

    def test_similarity_recovered_with_area_scaled_normal(self):
        sphere = fixtures.uv_sphere()
        a = 1.7 * Rotation.from_rotvec([0.2, 0.5, -0.7]).as_matrix()
        moved = fixtures.affine_mesh(sphere, a, [0.3, 0.0, 0.1])
        jac, _ = frame_arrays(load_pair(sphere, moved), normal_scaling="sqrt_area")
        np.testing.assert_allclose(jac, np.broadcast_to(a, jac.shape), atol=1e-12)

    def test_affine_matches_on_tangent_plane(self):
        sphere = fixtures.uv_sphere()
        rng = np.random.default_rng(3)
        a, b = fixtures.random_affine(rng)
        jac, _ = frame_arrays(load_pair(sphere, fixtures.affine_mesh(sphere, a, b)))
        v = sphere.vertices[sphere.faces]
        for e in (v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]):
            np.testing.assert_allclose(np.einsum("fij,fj->fi", jac, e), e @ a.T, atol=1e-12)

    def test_planar_affine_gives_one_frame_for_all_faces(self):
        flat = fixtures.grid_patch(n=4, bump=0.0)
        rng = np.random.default_rng(5)
        a, b = fixtures.random_affine(rng)
        jac, _ = frame_arrays(load_pair(flat, fixtures.affine_mesh(flat, a, b)))
        np.testing.assert_allclose(jac, np.broadcast_to(jac[0], jac.shape), atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(deformations)
    def test_full_jacobian_maps_edges(self, noise):
        c = cube()
        try:
            pair = load_pair(c, c.with_vertices(c.vertices + noise))
        except DegenerateFace:
            return
        jac, trans = frame_arrays(pair)
        v, w = c.vertices[c.faces], pair.deformed.vertices[c.faces]
        for k in (1, 2):
            e_rest, e_def = v[:, k] - v[:, 0], w[:, k] - w[:, 0]
            got = np.einsum("fij,fj->fi", jac, e_rest)
            assert np.all(np.linalg.norm(got - e_def, axis=1)
                          <= 1e-9 * np.linalg.norm(e_def, axis=1))
        np.testing.assert_array_equal(trans, w.mean(axis=1))

    @settings(max_examples=40, deadline=None)
    @given(deformations)
    def test_scaled_rotation_consistency(self, noise):
        c = cube()
        try:
            pair = load_pair(c, c.with_vertices(c.vertices + noise))
        except DegenerateFace:
            return
        jac, _ = frame_arrays(pair, Variant.SCALED_ROTATION)
        s2 = pair.deformed.areas / pair.rest.areas
        err = np.linalg.norm(np.swapaxes(jac, 1, 2) @ jac - s2[:, None, None] * np.eye(3),
                             axis=(1, 2))
        assert np.all(err <= 1e-6 * s2)
        assert np.all(np.linalg.det(jac) > 0)

    def test_collapsed_face_named(self):
        c = cube()
        v = c.vertices.copy()
        i, j, k = c.faces[5]
        v[k] = v[i] + 0.5 * (v[j] - v[i])  # face 5 becomes a segment
        with pytest.raises(DegenerateFace) as err:
            load_pair(c, TriMesh(v, c.faces, c.uv_coords, c.uv_faces))
        assert err.value.face_index == 5

    def test_all_face_frames_order(self):
        c = cube()
        v = c.vertices + np.random.default_rng(0).normal(0, 0.05, c.vertices.shape)
        pair = load_pair(c, c.with_vertices(v))
        frames = all_face_frames(pair)
        jac, trans = stack_frames(frames)
        jac2, trans2 = frame_arrays(pair)
        np.testing.assert_array_equal(jac, jac2)
        np.testing.assert_array_equal(trans, trans2)
        single = face_frame(pair, 7)
        np.testing.assert_allclose(single.jacobian, jac[7], atol=1e-14)
