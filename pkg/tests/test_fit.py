import numpy as np
import pytest

import oracles
from texrig.errors import NonFiniteLoss
from texrig.fit import (Adam, FitConfig, LossWeights, fit, perturb, read_trace, render_frames,
                        total_loss, write_trace)
from texrig.fixtures import recovery_scene
from texrig.validate import random_local_maps, strip_scene


@pytest.fixture(scope="module")
def small():
    rest, frames, scene, truth = recovery_scene(texels=6, image_size=24, seed=1)
    return rest, frames, scene, truth


def inactive_weights(rest):
    return LossWeights(eps_mu=10.0, eps_s=10.0).resolved(rest)


class TestTotalLoss:
    def test_zero_at_target(self, small):
        rest, _, scene, truth = small
        res = total_loss(truth, scene, inactive_weights(rest))
        assert res.total == 0.0
        for g in res.grads.values():
            assert np.abs(g).max() < 1e-12

    def test_regularizer_weight_is_linear(self, small):
        rest, _, scene, truth = small
        maps = perturb(truth, 0.5, 3)
        w1 = LossWeights(lambda_reg_mu=0.2, lambda_reg_s=0.3, eps_mu=0.01, eps_s=0.01)
        w2 = LossWeights(lambda_reg_mu=0.4, lambda_reg_s=0.6, eps_mu=0.01, eps_s=0.01)
        w0 = LossWeights(lambda_reg_mu=0.0, lambda_reg_s=0.0, eps_mu=0.01, eps_s=0.01)
        base = total_loss(maps, scene, w0, with_grad=False).total
        r1 = total_loss(maps, scene, w1, with_grad=False).total - base
        r2 = total_loss(maps, scene, w2, with_grad=False).total - base
        assert r1 > 0
        assert np.isclose(r2, 2 * r1, rtol=1e-12)

    def test_regularizer_gradients_vanish_inside_bounds(self, small):
        rest, _, scene, truth = small
        a = total_loss(truth.replace(color=truth.color + 0.3), scene, inactive_weights(rest))
        w = inactive_weights(rest)
        w.lambda_reg_mu = w.lambda_reg_s = 0.0
        b = total_loss(truth.replace(color=truth.color + 0.3), scene, w)
        for name in a.grads:
            np.testing.assert_array_equal(a.grads[name], b.grads[name])

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        rest, scene = strip_scene(rng, image_size=24, texels=3)
        local = random_local_maps(rng, scene.face_map.mask, position_scale=0.1,
                                  log_scale=(-2.6, -1.8))
        weights = LossWeights(eps_mu=10.0, eps_s=10.0)
        frame = scene.frames[0]
        image = render_frames(local, scene)[0]
        frame.target = image + np.where(image < 0.5, 0.1, -0.1)
        base = total_loss(local, scene, weights)
        floor = 1e-6 * max(np.abs(g).max() for g in base.grads.values())
        for name, arr in local.arrays().items():
            def f(x, name=name):
                return total_loss(local.replace(**{name: x}), scene, weights,
                                  footprints=base.footprints, with_grad=False).total
            num = oracles.central_difference(f, arr, 1e-4)
            assert oracles.relative_errors(base.grads[name], num, floor).max() <= 1e-3, name


class TestAdam:
    def test_first_step_by_hand(self):
        p = {"a": np.array([1.0, -2.0])}
        g = {"a": np.array([0.5, -4.0])}
        opt = Adam(p, {"a": 0.1})
        out = opt.step(p, g)
        # bias-corrected m/sqrt(v) = g/|g| on the first step
        np.testing.assert_allclose(out["a"], [0.9, -1.9], atol=1e-12)

    def test_second_step_by_hand(self):
        p = {"a": np.array([0.0])}
        opt = Adam(p, {"a": 0.01})
        p = opt.step(p, {"a": np.array([1.0])})
        p = opt.step(p, {"a": np.array([3.0])})
        m = (0.9 * 0.1 * 1.0 + 0.1 * 3.0) / (1 - 0.9 ** 2)
        v = (0.999 * 0.001 * 1.0 + 0.001 * 9.0) / (1 - 0.999 ** 2)
        np.testing.assert_allclose(p["a"], [-0.01 - 0.01 * m / (np.sqrt(v) + 1e-15)], atol=1e-15)

    def test_missing_rate_freezes_group(self):
        p = {"a": np.ones(2), "b": np.ones(2)}
        out = Adam(p, {"a": 0.1}).step(p, {"a": np.ones(2), "b": np.ones(2)})
        np.testing.assert_array_equal(out["b"], p["b"])


class TestFit:
    def test_zero_iterations_returns_initial(self, small):
        rest, frames, scene, truth = small
        start = perturb(truth, 0.05, 0)
        out, trace = fit(FitConfig(rest, frames, iterations=0), start, scene)
        assert trace == []
        for name, arr in start.arrays().items():
            assert getattr(out, name).tobytes() == arr.tobytes()

    def test_deterministic_and_finite(self, small):
        rest, frames, scene, truth = small
        start = perturb(truth, 0.05, 4)
        cfg = FitConfig(rest, frames, iterations=15)
        a, trace_a = fit(cfg, start, scene)
        b, trace_b = fit(cfg, start, scene)
        for name, arr in a.arrays().items():
            assert getattr(b, name).tobytes() == arr.tobytes()
        assert trace_a == trace_b
        assert [row[0] for row in trace_a] == list(range(15))
        assert np.all(np.isfinite(np.array(trace_a)))
        assert trace_a[-1][1] < trace_a[0][1]

    def test_does_not_modify_initial(self, small):
        rest, frames, scene, truth = small
        start = perturb(truth, 0.05, 5)
        before = start.position.copy()
        fit(FitConfig(rest, frames, iterations=2), start, scene)
        np.testing.assert_array_equal(start.position, before)

    def test_non_finite_loss(self, small):
        rest, frames, _, truth = small
        bad = [type(f)(f.deformed, f.camera, np.full_like(f.target, np.nan)) for f in frames]
        with pytest.raises(NonFiniteLoss) as err:
            fit(FitConfig(rest, bad, iterations=3), truth)
        assert err.value.iteration == 0

    def test_trace_csv(self, tmp_path, small):
        rest, frames, scene, truth = small
        _, trace = fit(FitConfig(rest, frames, iterations=3), perturb(truth, 0.05, 6), scene)
        write_trace(tmp_path / "trace.csv", trace)
        header = (tmp_path / "trace.csv").read_text().splitlines()[0]
        assert header == "iteration,total,l1,ssim,reg_mu,reg_s"
        assert read_trace(tmp_path / "trace.csv") == [tuple(map(float, r)) for r in trace]


def test_perturb_is_bounded_and_seeded(small):
    *_, truth = small
    a, b = perturb(truth, 0.05, 9), perturb(truth, 0.05, 9)
    for name, arr in truth.arrays().items():
        d = getattr(a, name) - arr
        assert np.abs(d).max() <= 0.05
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
