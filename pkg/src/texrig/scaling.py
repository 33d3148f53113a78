"""Compare parameter-gradient norms of local and global-offset parameterizations.

The offset baseline writes world positions as ``rest + D * theta`` where
``theta`` is a normalized decoder output and ``D`` the largest displacement
it must represent, so ``d theta = D * g``. The local parameterization maps
``theta`` through the face frame, so ``d theta = J^T g`` and
``|J^T g| <= sigma_max(J) |g|`` regardless of how far the mesh moved.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fixtures, losses
from .mesh import frame_arrays, load_pair
from .render import Camera, _rasterize, render_backward
from .rig import LocalAttributeMaps, lift_naive_with_cache, local_position_pullback
from .texel import rasterize_faces


@dataclass
class ScalingRow:
    magnitude: float
    displacement: float  # largest Gaussian displacement from the rest lift
    sigma_max: float  # largest singular value over face frames
    image_grad_norm: float  # |dL/dG_d| over positions
    local_grad_norm: float
    local_bound: float  # sigma_max * |dL/dG_d|
    offset_grad_norm: float


def _rigid(magnitude):
    angle = 0.4 * magnitude
    axis = np.array([0.3, 1.0, 0.2])
    axis /= np.linalg.norm(axis)
    rot = np.array([fixtures.rotate_about_axis(e, axis, angle) for e in np.eye(3)]).T
    return rot, magnitude * np.array([0.6, 0.2, -0.3])


def _follow(camera, rot, shift):
    """Camera moved with the object so the rendered image does not change."""
    r = camera.rotation @ rot.T
    d = camera.to_dict()
    d.update(rotation=r.tolist(), translation=(camera.translation - r @ shift).tolist())
    return Camera.from_dict(d)


def gradient_scaling_report(magnitudes=(0.25, 0.5, 1.0, 2.0, 4.0), resolution=16,
                            image_size=32, seed=0):
    """One row per rigid deformation magnitude on a bumped grid patch."""
    rng = np.random.default_rng(seed)
    rest = fixtures.grid_patch(n=4)
    face_map = rasterize_faces(rest, resolution, resolution)
    local = LocalAttributeMaps.surface_init(rest, face_map)
    wiggle = local.replace(position=local.position
                           + 0.05 * rest.mean_edge_length() * rng.standard_normal(local.position.shape))
    base_cam = fixtures.front_camera(image_size, image_size, background=(0.1, 0.1, 0.1))
    rest_frames = frame_arrays(load_pair(rest, rest))
    rest_pos = lift_naive_with_cache(local, face_map, rest_frames)[0].positions

    rows = []
    for m in magnitudes:
        rot, shift = _rigid(m)
        deformed = fixtures.affine_mesh(rest, rot, shift)
        frames = frame_arrays(load_pair(rest, deformed))
        cam = _follow(base_cam, rot, shift)
        gs, cache = lift_naive_with_cache(local, face_map, frames)
        target = _rasterize(lift_naive_with_cache(wiggle, face_map, frames)[0], cam)[0].image
        raster, _ = _rasterize(gs, cam)
        _, d_img = losses.loss_l1_grad(raster.image, target)
        g = render_backward(gs, cam, d_img, raster=raster).d_position
        g_norm = float(np.linalg.norm(g))
        disp = float(np.linalg.norm(gs.positions - rest_pos, axis=1).max())
        sigma = float(np.linalg.svd(frames[0], compute_uv=False).max())
        rows.append(ScalingRow(
            magnitude=float(m), displacement=disp, sigma_max=sigma, image_grad_norm=g_norm,
            local_grad_norm=float(np.linalg.norm(local_position_pullback(cache, g))),
            local_bound=sigma * g_norm, offset_grad_norm=disp * g_norm))
    return rows


def format_report(rows):
    head = ("magnitude", "displacement", "sigma_max", "|dL/dG_d|", "|grad local|", "local bound",
            "|grad offset|")
    lines = ["  ".join(f"{h:>13}" for h in head)]
    for r in rows:
        lines.append("  ".join(f"{v:13.6g}" for v in (
            r.magnitude, r.displacement, r.sigma_max, r.image_grad_norm, r.local_grad_norm,
            r.local_bound, r.offset_grad_norm)))
    return "\n".join(lines)
