"""Self-check suite run by ``texrig validate``.

Each check builds its own synthetic fixture, compares the library against an
independent computation and returns a :class:`CheckResult`.
"""

from __future__ import annotations

import os
import tempfile
import time
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import fixtures, rig, scaling, texel
from .fit import Frame, LossWeights, lift_frame, prepare_scene, total_loss
from .mesh import frame_arrays, load_pair
from .render import ALPHA_MAX, LOW_PASS, SIGMA_EXTENT, Camera, render
from .rig import GlobalGaussianSet, LocalAttributeMaps


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<22} {self.seconds:7.2f}s  {self.detail}"


@contextmanager
def injected_faults(**faults):
    """Temporarily change test-only fault switches (e.g. ``cov_pullback_sign=-1``)."""
    saved = dict(rig._FAULTS)
    unknown = set(faults) - set(saved)
    if unknown:
        raise KeyError(f"unknown fault(s): {sorted(unknown)}")
    rig._FAULTS.update(faults)
    try:
        yield
    finally:
        rig._FAULTS.clear()
        rig._FAULTS.update(saved)


def relative_error(analytic, numeric, floor):
    """Elementwise ``|a - f| / max(|a|, |f|, floor)``."""
    a, f = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)


# ---------------------------------------------------------------------------
# fixtures


def random_local_maps(rng, mask, position_scale=0.1, log_scale=(-3.0, -1.5)):
    h, w = mask.shape
    q = rng.standard_normal((h, w, 4))
    q[..., 0] += 1.5 * np.sign(q[..., 0])  # keep norms well away from zero
    return LocalAttributeMaps(
        position=position_scale * rng.uniform(-1, 1, (h, w, 3)),
        rotation=q,
        log_scale=rng.uniform(*log_scale, (h, w, 3)),
        opacity=rng.uniform(-1.0, 2.0, (h, w, 1)),
        color=rng.uniform(-2.0, 2.0, (h, w, 3)),
        mask=mask)


def strip_scene(rng, image_size=32, texels=4):
    """Bent two-face strip centred at the origin, seen from a random direction."""
    rest, bent = fixtures.bent_strip(rng.uniform(0.0, 60.0))
    centre = np.array([-0.5, -0.5, 0.0])
    rest = fixtures.affine_mesh(rest, np.eye(3), centre)
    bent = fixtures.affine_mesh(bent, np.eye(3), centre)
    cam = fixtures.front_camera(image_size, image_size, distance=2.0,
                                yaw_deg=rng.uniform(-25, 25), pitch_deg=rng.uniform(-25, 25),
                                background=tuple(rng.uniform(0, 1, 3)))
    scene = prepare_scene(rest, [Frame(bent, cam)], texels, texels)
    return rest, scene


def _offset_target(image, margin=0.1):
    """Target kept ``margin`` away from ``image`` at every pixel and channel."""
    return image + np.where(image < 0.5, margin, -margin)


# ---------------------------------------------------------------------------
# checks


def check_affine(n_deformations=50, seed=0):
    """Face frames equal the affine's linear part; naive and blended lifts agree."""
    rng = np.random.default_rng(seed)
    sphere = fixtures.uv_sphere()
    face_map = texel.rasterize_faces(sphere, 32, 32)
    jac_err = lift_pos = lift_cov = 0.0
    for _ in range(n_deformations):
        a, b = fixtures.random_affine(rng)
        jac, trans = frame_arrays(load_pair(sphere, fixtures.affine_mesh(sphere, a, b)))
        jac_err = max(jac_err, float(np.abs(jac - a).max() / np.abs(a).max()))
        local = random_local_maps(rng, face_map.mask)
        fld = texel.dilate_field(texel.build_jacobian_field((jac, trans), face_map), 2)
        naive = rig.lift_naive(local, face_map, (jac, trans))
        blended = rig.lift_quasi_phong(local, fld)
        lift_pos = max(lift_pos, float(np.abs(naive.positions - blended.positions).max()))
        lift_cov = max(lift_cov, float(np.abs(naive.covariances - blended.covariances).max()))
    ok = jac_err <= 1e-9 and lift_pos <= 1e-6 and lift_cov <= 1e-6
    return ok, (f"max |J-A|/|A| {jac_err:.2e} (tol 1e-9); naive vs blended: "
                f"position {lift_pos:.2e}, covariance {lift_cov:.2e} (tol 1e-6)")


def check_psd(n_draws=1000, seed=0):
    """Blended covariances stay PSD for random quaternions, scales and Jacobian fields."""
    rng = np.random.default_rng(seed)
    side = 10
    worst = np.inf
    count = 0
    while count < n_draws:
        mask = np.ones((side, side), dtype=bool)
        jac = rng.standard_normal((side, side, 3, 3)) * rng.uniform(0.1, 3.0)
        fld = texel.JacobianField(jac.astype(np.float32),
                                  rng.standard_normal((side, side, 3)).astype(np.float32),
                                  mask, np.zeros_like(mask))
        local = random_local_maps(rng, mask, log_scale=(-4.0, 1.0))
        cov = rig.lift_quasi_phong(local, fld).covariances
        eig = np.linalg.eigvalsh(cov)[:, 0]
        tr = np.trace(cov, axis1=1, axis2=2)
        worst = min(worst, float((eig / tr).min()))
        count += len(cov)
    return worst >= -1e-9, f"{count} draws, min eigenvalue / trace {worst:.2e} (tol -1e-9)"


def reference_sample(grid, usable, u, v):
    """Scalar center-convention bilinear sample with clamp-to-edge and renormalization."""
    h, w = grid.shape[:2]
    x = min(max(u * w - 0.5, 0.0), w - 1.0)
    y = min(max(v * h - 0.5, 0.0), h - 1.0)
    i0, j0 = int(np.floor(x)), int(np.floor(y))
    i1, j1 = min(i0 + 1, w - 1), min(j0 + 1, h - 1)
    fx, fy = x - i0, y - j0
    total = np.zeros(grid.shape[2:])
    weight_sum = 0.0
    dropped = False
    for i, j, wt in ((i0, j0, (1 - fx) * (1 - fy)), (i1, j0, fx * (1 - fy)),
                     (i0, j1, (1 - fx) * fy), (i1, j1, fx * fy)):
        if usable[j, i]:
            total = total + wt * grid[j, i]
            weight_sum += wt
        elif wt > 0:
            dropped = True
    if weight_sum <= 0:
        return None
    return total / weight_sum if dropped else total


def check_sampler(n_points=10_000, seed=0):
    """Sampler against the scalar reference; resample against pointwise sampling."""
    rng = np.random.default_rng(seed)
    worst = worst_resample = 0.0
    done = 0
    while done < n_points:
        w, h = rng.integers(8, 65, size=2)
        grid = rng.standard_normal((h, w, 2))
        mask = rng.uniform(size=(h, w)) < 0.8
        u, v = rng.uniform(size=(2, 500))
        for uu, vv in zip(u, v):
            ref = reference_sample(grid, mask, uu, vv)
            if ref is None:
                continue
            got = texel.sample_bilinear(grid, mask, uu, vv)
            worst = max(worst, float(np.abs(got - ref).max()))
            done += 1
        out, ok = texel.corner_lattice_resample(grid, mask)
        for j in range(h):
            for i in range(w):
                ref = reference_sample(grid, mask, i / (w - 1), j / (h - 1))
                if (ref is None) == bool(ok[j, i]):
                    return False, f"resample validity differs from pointwise at ({i}, {j})"
                if ref is not None:
                    worst_resample = max(worst_resample, float(np.abs(out[j, i] - ref).max()))
    ok = worst <= 1e-6 and worst_resample <= 1e-12
    return ok, (f"{done} points, max sample error {worst:.2e} (tol 1e-6); "
                f"resample vs pointwise {worst_resample:.2e}")


def _away_from_kinks(local, weights, margin):
    """Move hinge arguments at least ``margin`` off the regularizer kinks."""
    mu = local.position
    gap = np.abs(mu) - weights.eps_mu
    near = np.abs(gap) < margin
    mu = np.where(near, np.sign(mu) * (weights.eps_mu + margin), mu)
    s = np.exp(local.log_scale)
    near = np.abs(s - weights.eps_s) < margin
    log_s = np.where(near, np.log(weights.eps_s + margin), local.log_scale)
    return local.replace(position=mu, log_scale=log_s)


def gradient_check_config(rng, h=1e-4):
    """Worst relative error of the end-to-end gradient over every raw component."""
    rest, scene = strip_scene(rng)
    mask = scene.face_map.mask
    local = random_local_maps(rng, mask, position_scale=0.15, log_scale=(-2.6, -1.8))
    edge = rest.mean_edge_length()
    weights = LossWeights(eps_mu=0.1 * edge, eps_s=0.1).resolved(rest)
    local = _away_from_kinks(local, weights, margin=100 * h)
    frame = scene.frames[0]
    frame.target = _offset_target(render(lift_frame(local, frame, "quasi_phong")[0],
                                         frame.camera).image)
    base = total_loss(local, scene, weights)
    fp = base.footprints
    worst = 0.0
    floor = 1e-6 * max(float(np.abs(g).max()) for g in base.grads.values())
    for name, arr in local.arrays().items():
        def diff(idx, step, name=name, arr=arr):
            plus, minus = arr.copy(), arr.copy()
            plus[idx] += step
            minus[idx] -= step
            fp_ = total_loss(local.replace(**{name: plus}), scene, weights, footprints=fp,
                             with_grad=False).total
            fm_ = total_loss(local.replace(**{name: minus}), scene, weights, footprints=fp,
                             with_grad=False).total
            return (fp_ - fm_) / (2 * step)

        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            # Richardson step: cancels the h^2 term that dominates on near-flat components
            num[idx] = (4 * diff(idx, h) - diff(idx, 2 * h)) / 3
        worst = max(worst, float(relative_error(base.grads[name], num, floor).max()))
    return worst


def check_gradients(n_configs=100, seed=0):
    rng = np.random.default_rng(seed)
    errors = [gradient_check_config(rng) for _ in range(n_configs)]
    worst = max(errors)
    return worst <= 1e-3, f"{n_configs} configs, worst relative error {worst:.2e} (tol 1e-3)"


def check_gradient_bound(n_draws=10_000, seed=0):
    """Local pullback norm bounded by sigma_max(J) |g|; offset baseline grows with displacement."""
    rng = np.random.default_rng(seed)
    side = 100
    n = side * side
    jac = rng.standard_normal((n, 3, 3)) * rng.uniform(0.2, 3.0, (n, 1, 1))
    face_map = texel.FaceIdMap(np.arange(n).reshape(side, side),
                               np.full((side, side, 3), 1.0 / 3.0))
    local = random_local_maps(rng, face_map.mask)
    _, cache = rig.lift_naive_with_cache(local, face_map, (jac, np.zeros((n, 3))))
    g = rng.standard_normal((n, 3)) * rng.uniform(1e-3, 1e3, (n, 1))
    pulled = rig.local_position_pullback(cache, g).reshape(n, 3)
    sigma = np.linalg.svd(jac, compute_uv=False)[:, 0]
    ratio = np.linalg.norm(pulled, axis=1) / (sigma * np.linalg.norm(g, axis=1))
    bound_ok = bool(np.all(ratio <= 1.0 + 1e-12))

    rows = scaling.gradient_scaling_report(seed=seed)
    d0, o0 = rows[0].displacement, rows[0].offset_grad_norm
    growth_ok = all(r.offset_grad_norm / o0 >= (r.displacement / d0) * (1 - 1e-9) for r in rows)
    local_fixed = all(abs(r.local_grad_norm - rows[0].local_grad_norm)
                      <= 1e-9 * rows[0].local_grad_norm and r.local_grad_norm <= r.local_bound * (1 + 1e-12)
                      for r in rows)
    growth = rows[-1].offset_grad_norm / o0
    return bound_ok and growth_ok and local_fixed, (
        f"{n} draws, max |J^T g| / (sigma_max |g|) {ratio.max():.6f}; offset gradient x{growth:.1f} "
        f"for displacement x{rows[-1].displacement / d0:.1f}, local gradient fixed: {local_fixed}")


def ewa_footprint_image(camera, position, sigma, color, opacity):
    """Closed-form image of one isotropic Gaussian on the optical axis.

    The footprint is evaluated on the renderer's support (the 3-sigma box);
    outside it only background remains.
    """
    z = (camera.rotation @ position + camera.translation)[2]
    var = (camera.fx * sigma / z) ** 2 + LOW_PASS
    ys, xs = np.mgrid[0:camera.height, 0:camera.width].astype(np.float64)
    dx, dy = xs - camera.cx, ys - camera.cy
    alpha = np.minimum(opacity * np.exp(-0.5 * (dx * dx + dy * dy) / var), ALPHA_MAX)
    reach = SIGMA_EXTENT * np.sqrt(var)
    alpha[(np.abs(dx) > reach) | (np.abs(dy) > reach)] = 0.0
    return alpha[..., None] * color + (1 - alpha[..., None]) * camera.background


def check_renderer(seed=0):
    rng = np.random.default_rng(seed)
    cam = Camera(60.0, 60.0, 31.5, 31.5, np.eye(3), [0.0, 0.0, 0.0], 64, 64,
                 background=(0.1, 0.2, 0.3))
    worst_fp = 0.0
    for _ in range(5):
        depth, sigma = rng.uniform(1.5, 4.0), rng.uniform(0.02, 0.15)
        color, opacity = rng.uniform(0, 1, 3), rng.uniform(0.3, 0.99)
        pos = np.array([0.0, 0.0, depth])
        gs = GlobalGaussianSet(pos[None], (sigma ** 2 * np.eye(3))[None], color[None],
                               np.array([opacity]), np.zeros((1, 2), dtype=np.int64))
        got = render(gs, cam).image
        worst_fp = max(worst_fp, float(np.abs(got - ewa_footprint_image(cam, pos, sigma, color,
                                                                          opacity)).max()))
    worst_sum = 0.0
    for _ in range(5):
        n = 60
        pos = rng.uniform(-0.6, 0.6, (n, 3)) + [0, 0, 3.0]
        a = rng.standard_normal((n, 3, 3)) * 0.05
        gs = GlobalGaussianSet(pos, a @ np.swapaxes(a, 1, 2), rng.uniform(0, 1, (n, 3)),
                               rng.uniform(0.05, 1.0, n), np.zeros((n, 2), dtype=np.int64))
        out = render(gs, cam)
        per_pixel = np.bincount(out.footprint.pair_pixel, weights=out.weights,
                                minlength=cam.width * cam.height).reshape(cam.height, cam.width)
        worst_sum = max(worst_sum, float(np.abs(per_pixel + out.background_weight - 1).max()))
    ok = worst_fp <= 1e-3 and worst_sum <= 1e-6
    return ok, f"footprint error {worst_fp:.2e} (tol 1e-3); weight-sum error {worst_sum:.2e} (tol 1e-6)"


def check_export(n=1000, seed=0):
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((n, 4))
    cov = rig.local_covariances(q, rng.uniform(-4, 0, (n, 3)))
    gs = GlobalGaussianSet(rng.standard_normal((n, 3)), cov, rng.uniform(0, 1, (n, 3)),
                           rng.uniform(0.01, 0.99, n), np.zeros((n, 2), dtype=np.int64))
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "g.ply")
        rig.export_gaussians(gs, path)
        back = rig.import_gaussians(path)
    rel = np.linalg.norm(back.covariances - cov, axis=(1, 2)) / np.linalg.norm(cov, axis=(1, 2))
    return float(rel.max()) <= 1e-5, f"{n} Gaussians, max relative Frobenius error {rel.max():.2e} (tol 1e-5)"


CHECKS = {
    "affine": check_affine,
    "psd": check_psd,
    "sampler": check_sampler,
    "gradients": check_gradients,
    "gradient_bound": check_gradient_bound,
    "renderer": check_renderer,
    "export": check_export,
}


def run_checks(names=None, seed=0, log=None):
    results = []
    for name in names or CHECKS:
        t0 = time.perf_counter()
        ok, detail = CHECKS[name](seed=seed)
        res = CheckResult(name, bool(ok), detail, time.perf_counter() - t0)
        results.append(res)
        if log is not None:
            log(res.line())
    return results
