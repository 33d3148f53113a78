import numpy as np
import pytest
from scipy.spatial.transform import Rotation

import oracles
from texrig import fixtures
from texrig.errors import NonPSD, ZeroQuaternion
from texrig.mesh import frame_arrays, load_pair
from texrig.rig import (SH_C0, GlobalGaussianSet, LocalAttributeMaps, assemble_local_covariance,
                        export_gaussians, import_gaussians, lift_backward, lift_naive,
                        lift_quasi_phong, lift_with_cache)
from texrig.texel import JacobianField, build_jacobian_field, dilate_field, rasterize_faces


def random_maps(rng, mask, position_scale=0.05):
    h, w = mask.shape
    return LocalAttributeMaps(rng.normal(0, position_scale, (h, w, 3)),
                              rng.normal(0, 1, (h, w, 4)), rng.normal(-2.5, 0.3, (h, w, 3)),
                              rng.normal(0, 1, (h, w, 1)), rng.normal(0, 1, (h, w, 3)), mask)


def strip(angle, size=12, rings=2):
    rest, bent = fixtures.bent_strip(angle)
    fm = rasterize_faces(rest, size, size)
    frames = frame_arrays(load_pair(rest, bent))
    field = dilate_field(build_jacobian_field(frames, fm), rings)
    return rest, fm, frames, field


class TestLocalCovariance:
    def test_identity(self):
        np.testing.assert_array_equal(assemble_local_covariance([1, 0, 0, 0], [0, 0, 0]), np.eye(3))

    def test_axis_scale(self):
        np.testing.assert_allclose(assemble_local_covariance([1, 0, 0, 0], [np.log(2), 0, 0]),
                                   np.diag([4.0, 1.0, 1.0]), atol=1e-14)

    def test_eigenvalues_are_squared_scales(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            q, ls = rng.normal(size=4), rng.normal(size=3)
            cov = assemble_local_covariance(q, ls)
            np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(cov)), np.sort(np.exp(2 * ls)),
                                       atol=1e-9)
            r = oracles.quat_matrix(q)
            np.testing.assert_allclose(cov, r @ np.diag(np.exp(2 * ls)) @ r.T, atol=1e-12)

    def test_zero_quaternion(self):
        with pytest.raises(ZeroQuaternion):
            assemble_local_covariance([0, 0, 0, 1e-9], [0, 0, 0])

    def test_zero_quaternion_reports_texel(self):
        rest, fm, frames, _ = strip(0, size=6)
        maps = LocalAttributeMaps.constant(fm.mask)
        j, i = np.argwhere(fm.mask)[3]
        maps.rotation[j, i] = 0.0
        with pytest.raises(ZeroQuaternion) as err:
            lift_naive(maps, fm, frames)
        assert err.value.texel == (i, j)


class TestLiftNaive:
    def test_identity_frames_give_centroids(self):
        rest, fm, frames, _ = strip(0)
        gs = lift_naive(LocalAttributeMaps.constant(fm.mask), fm, frames)
        centroids = rest.vertices[rest.faces].mean(axis=1)
        i, j = gs.source_texel.T
        np.testing.assert_array_equal(gs.positions, centroids[fm.face[j, i]])
        assert len(gs) == fm.mask.sum()

    def test_covariance_determinant_scales(self):
        sphere = fixtures.uv_sphere()
        a, b = fixtures.random_affine(np.random.default_rng(2))
        fm = rasterize_faces(sphere, 16, 16)
        frames = frame_arrays(load_pair(sphere, fixtures.affine_mesh(sphere, a, b)))
        maps = random_maps(np.random.default_rng(3), fm.mask)
        gs = lift_naive(maps, fm, frames)
        i, j = gs.source_texel.T
        local = np.array([assemble_local_covariance(maps.rotation[y, x], maps.log_scale[y, x])
                          for x, y in zip(i, j)])
        det_j = np.linalg.det(frames[0][fm.face[j, i]])
        np.testing.assert_allclose(np.linalg.det(gs.covariances),
                                   det_j ** 2 * np.linalg.det(local), rtol=1e-9)

    def test_activations(self):
        rest, fm, frames, _ = strip(20)
        maps = LocalAttributeMaps.constant(fm.mask, opacity=0.25, color=(0.1, 0.5, 0.9))
        gs = lift_naive(maps, fm, frames)
        np.testing.assert_allclose(gs.opacities, 0.25, atol=1e-12)
        np.testing.assert_allclose(gs.colors, np.broadcast_to([0.1, 0.5, 0.9], gs.colors.shape),
                                   atol=1e-12)

    def test_surface_init_reproduces_deformed_surface(self):
        rest, bent = fixtures.bent_strip(40)
        fm = rasterize_faces(rest, 10, 10)
        frames = frame_arrays(load_pair(rest, bent))
        gs = lift_naive(LocalAttributeMaps.surface_init(rest, fm), fm, frames)
        i, j = gs.source_texel.T
        corners = bent.vertices[bent.faces[fm.face[j, i]]]
        expected = np.einsum("nk,nkc->nc", fm.bary[j, i], corners)
        np.testing.assert_allclose(gs.positions, expected, atol=1e-12)


class TestLiftQuasiPhong:
    def test_matches_naive_under_affine_deformation(self):
        flat = fixtures.grid_patch(n=4, bump=0.0)
        a, b = fixtures.random_affine(np.random.default_rng(7))
        fm = rasterize_faces(flat, 16, 16)
        frames = frame_arrays(load_pair(flat, fixtures.affine_mesh(flat, a, b)))
        field = dilate_field(build_jacobian_field(frames, fm), 2)
        maps = LocalAttributeMaps.constant(fm.mask, rotation=(0.9, 0.1, -0.3, 0.2),
                                           scale=(0.02, 0.05, 0.01))
        naive = lift_naive(maps, fm, frames)
        qp = lift_quasi_phong(maps, field)
        np.testing.assert_allclose(qp.covariances, naive.covariances, atol=1e-6)

    def test_identity_field_constant_translation(self):
        mask = np.ones((6, 6), bool)
        t = np.array([0.5, -1.0, 2.0], np.float32)
        field = JacobianField(np.broadcast_to(np.eye(3, dtype=np.float32), (6, 6, 3, 3)).copy(),
                              np.broadcast_to(t, (6, 6, 3)).copy(), mask, np.zeros_like(mask))
        gs = lift_quasi_phong(LocalAttributeMaps.constant(mask), field)
        np.testing.assert_allclose(gs.positions, np.broadcast_to(t, (36, 3)), atol=1e-12)

    def test_psd_on_random_fields(self):
        rng = np.random.default_rng(11)
        for angle in (10, 45, 90, 150):
            _, fm, _, field = strip(angle, size=16)
            gs = lift_quasi_phong(random_maps(rng, fm.mask), field)
            gs.check_psd()
            eig = np.linalg.eigvalsh(gs.covariances)
            trace = np.trace(gs.covariances, axis1=1, axis2=2)
            assert np.all(eig[:, 0] >= -1e-9 * trace)

    def test_positions_in_candidate_hull(self):
        _, fm, _, field = strip(60, size=8)
        maps = random_maps(np.random.default_rng(12), fm.mask)
        gs, cache = lift_with_cache(maps, "quasi_phong", field=field)
        cand = np.zeros((64, 3))
        jac = cache.jacobians
        mu = maps.position.reshape(-1, 3)[cache.texel_index]
        t = field.translations.reshape(-1, 3)[cache.texel_index]
        cand[cache.texel_index] = np.einsum("nij,nj->ni", jac, mu) + t
        m = cache.operator.matrix.tocsr()
        for row, pos in zip(cache.valid_index, gs.positions):
            cols = m.indices[m.indptr[row]:m.indptr[row + 1]]
            assert np.all(pos <= cand[cols].max(0) + 1e-12)
            assert np.all(pos >= cand[cols].min(0) - 1e-12)

    def test_isolated_texel_keeps_its_own_value(self):
        _, fm, frames, _ = strip(30, size=8)
        field = build_jacobian_field(frames, fm)
        mask = np.zeros_like(fm.mask)
        mask[5, 3] = True
        field = JacobianField(field.jacobians, field.translations, mask, np.zeros_like(mask))
        gs = lift_quasi_phong(LocalAttributeMaps.constant(mask), field)
        # the corner-lattice sample always weights a texel's own center positively
        np.testing.assert_allclose(gs.positions[0], field.translations[5, 3], atol=1e-12)


class TestLiftBackward:
    @pytest.mark.parametrize("variant", ["naive", "quasi_phong"])
    def test_matches_finite_differences(self, variant):
        rng = np.random.default_rng(21)
        _, fm, frames, field = strip(50, size=5, rings=1)
        maps = random_maps(rng, fm.mask, position_scale=0.2)
        gs, cache = lift_with_cache(maps, variant, fm, frames, field)
        n = len(gs)
        gp, gc = rng.normal(size=(n, 3)), rng.normal(size=(n, 3, 3))
        gcol, gop = rng.normal(size=(n, 3)), rng.normal(size=n)

        def objective(m):
            g = lift_with_cache(m, variant, fm, frames, field)[0]
            return (np.sum(gp * g.positions) + np.sum(gc * g.covariances)
                    + np.sum(gcol * g.colors) + np.sum(gop * g.opacities))

        grads = lift_backward(cache, gp, gc, gcol, gop)
        for name in ("position", "rotation", "log_scale", "opacity", "color"):
            base = getattr(maps, name)

            def f(x, name=name):
                return objective(maps.replace(**{name: x}))

            numeric = oracles.central_difference(f, base, 1e-6)
            np.testing.assert_allclose(grads[name], numeric, atol=1e-6, rtol=1e-5)


class TestExport:
    def one(self, cov, color=(0.5, 0.5, 0.5), opacity=0.7):
        return GlobalGaussianSet(np.zeros((1, 3)), np.asarray(cov, float)[None],
                                 np.asarray(color, float)[None], np.array([opacity]),
                                 np.zeros((1, 2), np.int64))

    def read_table(self, path):
        raw = path.read_bytes()
        head, body = raw.split(b"end_header\n", 1)
        names = [ln.split()[2] for ln in head.decode().splitlines() if ln.startswith("property")]
        return dict(zip(names, np.frombuffer(body, "<f4").reshape(-1, len(names)).T))

    def test_identity_covariance(self, tmp_path):
        export_gaussians(self.one(np.eye(3)), tmp_path / "g.ply")
        t = self.read_table(tmp_path / "g.ply")
        np.testing.assert_allclose([t[f"scale_{k}"][0] for k in range(3)], 0.0, atol=1e-7)
        np.testing.assert_allclose([t[f"rot_{k}"][0] for k in range(4)], [1, 0, 0, 0], atol=1e-7)
        np.testing.assert_array_equal([t[f"f_dc_{k}"][0] for k in range(3)], 0.0)

    def test_color_and_opacity_encoding(self, tmp_path):
        export_gaussians(self.one(np.eye(3), color=(0.9, 0.5, 0.1), opacity=0.8), tmp_path / "g.ply")
        t = self.read_table(tmp_path / "g.ply")
        np.testing.assert_allclose(t["f_dc_0"][0], 0.4 / SH_C0, rtol=1e-6)
        np.testing.assert_allclose(t["opacity"][0], np.log(0.8 / 0.2), rtol=1e-6)

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        _, fm, _, field = strip(35, size=10)
        gs = lift_quasi_phong(random_maps(rng, fm.mask), field)
        export_gaussians(gs, tmp_path / "g.ply")
        back = import_gaussians(tmp_path / "g.ply")
        err = (np.linalg.norm(back.covariances - gs.covariances, axis=(1, 2))
               / np.linalg.norm(gs.covariances, axis=(1, 2)))
        assert err.max() < 1e-5
        np.testing.assert_allclose(back.positions, gs.positions, atol=1e-6)
        np.testing.assert_allclose(back.colors, gs.colors, atol=1e-6)
        np.testing.assert_allclose(back.opacities, gs.opacities, atol=1e-6)

    def test_rotation_is_proper(self, tmp_path):
        rot = Rotation.from_rotvec([0.4, -0.2, 1.0]).as_matrix()
        cov = rot @ np.diag([0.09, 0.04, 0.01]) @ rot.T
        export_gaussians(self.one(cov), tmp_path / "g.ply")
        back = import_gaussians(tmp_path / "g.ply")
        np.testing.assert_allclose(back.covariances[0], cov, atol=1e-7)

    def test_rejects_non_psd(self, tmp_path):
        with pytest.raises(NonPSD):
            export_gaussians(self.one(np.diag([1.0, 1.0, -0.5])), tmp_path / "g.ply")
        assert not (tmp_path / "g.ply").exists()

    def test_rejects_asymmetric(self, tmp_path):
        with pytest.raises(NonPSD):
            export_gaussians(self.one([[1, 0.5, 0], [0, 1, 0], [0, 0, 1]]), tmp_path / "g.ply")


def test_maps_save_load(tmp_path):
    _, fm, _, _ = strip(0, size=6)
    maps = random_maps(np.random.default_rng(5), fm.mask)
    maps.save(tmp_path / "m.txf")
    back = LocalAttributeMaps.load(tmp_path / "m.txf")
    for name, arr in maps.arrays().items():
        np.testing.assert_array_equal(getattr(back, name), arr.astype(np.float32))
    np.testing.assert_array_equal(back.mask, maps.mask)
    assert maps.geometry_map().shape[-1] == 11


def test_gaussian_indexing():
    _, fm, frames, _ = strip(10, size=4)
    gs = lift_naive(LocalAttributeMaps.constant(fm.mask), fm, frames)
    g = gs[2]
    np.testing.assert_array_equal(g.position, gs.positions[2])
    assert g.opacity == gs.opacities[2]
