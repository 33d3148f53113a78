"""CPU Gaussian splatting: EWA projection, depth-sorted compositing, backward pass.

Pixel ``(x, y)`` has its center at integer image coordinates ``(x, y)``; the
pinhole model maps camera-space ``t`` to ``(fx t_x / t_z + cx, fy t_y / t_z + cy)``.

The rasterizer works on a flat list of (Gaussian, pixel) pairs. Each kept
Gaussian contributes to the pixels inside the axis-aligned box of its 3-sigma
ellipse; pairs are ordered by pixel and, within a pixel, front to back
(depth, then Gaussian index). All discrete decisions (culling, boxes, order,
early termination) are collected in a :class:`Footprint`, which can be handed
back to :func:`render` to evaluate the same piecewise-smooth branch at nearby
parameters (used by the finite-difference oracles).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import NonPSD, ShapeMismatch

LOW_PASS = 0.3
ALPHA_MAX = 0.999
T_MIN = 1e-4
SIGMA_EXTENT = 3.0


@dataclass(frozen=True, eq=False)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # world -> camera
    translation: np.ndarray
    width: int
    height: int
    near: float = 0.01
    far: float = 100.0
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation",
                           np.asarray(self.translation, dtype=np.float64).reshape(3))
        object.__setattr__(self, "background",
                           np.asarray(self.background, dtype=np.float64).reshape(3))
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-8:
            raise ValueError("camera rotation is not orthonormal")

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), fov_deg=40.0, width=64, height=64, **kw):
        """Camera at ``eye`` looking at ``target``; +z forward, +y down in image."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(f, f, (width - 1) / 2, (height - 1) / 2, rot, -rot @ eye, width, height, **kw)

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
                "width": self.width, "height": self.height, "near": self.near, "far": self.far,
                "background": self.background.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float


@dataclass(frozen=True, eq=False)
class Footprint:
    """Discrete rasterization decisions of one forward pass."""

    kept: np.ndarray  # Gaussian indices that survived culling
    pair_gaussian: np.ndarray  # index into ``kept``, per pair, in compositing order
    pair_pixel: np.ndarray  # flat pixel index, per pair
    included: np.ndarray  # bool per pair (False once transmittance fell below T_MIN)


@dataclass(frozen=True, eq=False)
class RenderOutput:
    image: np.ndarray  # (H, W, 3) float64
    alpha: np.ndarray  # (H, W)
    footprint: Footprint
    weights: np.ndarray | None = None  # per pair compositing weight (for diagnostics)
    background_weight: np.ndarray | None = None  # (H, W) final transmittance


@dataclass(eq=False)
class _Projection:
    kept: np.ndarray
    cam: np.ndarray  # (K, 3) camera-space means
    jp: np.ndarray  # (K, 2, 3)
    m: np.ndarray  # (K, 2, 3) = jp @ R
    cov3: np.ndarray  # (K, 3, 3) symmetrised world covariance
    mean2d: np.ndarray  # (K, 2)
    cov2d: np.ndarray  # (K, 2, 2)
    conic: np.ndarray  # (K, 2, 2)


def _check_covariances(cov):
    if len(cov) == 0:
        return
    if not np.all(np.isfinite(cov)):
        raise NonPSD("non-finite covariance")
    sym = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    eig = np.linalg.eigvalsh(sym)
    trace = np.trace(sym, axis1=1, axis2=2)
    bad = np.flatnonzero(eig[:, 0] < -1e-9 * np.abs(trace))
    if len(bad):
        raise NonPSD(f"covariance {bad[0]} has eigenvalue {eig[bad[0], 0]:.3e}")


def _project(positions, covariances, camera, kept=None):
    rot, tr = camera.rotation, camera.translation
    cam = positions @ rot.T + tr
    cov3 = 0.5 * (covariances + np.swapaxes(covariances, -1, -2))
    tx, ty, tz = cam[:, 0], cam[:, 1], cam[:, 2]
    if kept is None:
        depth_ok = (tz > camera.near) & (tz < camera.far)
    else:
        depth_ok = np.zeros(len(cam), dtype=bool)
        depth_ok[kept] = True
    safe_z = np.where(depth_ok, tz, 1.0)
    jp = np.zeros((len(cam), 2, 3))
    jp[:, 0, 0] = camera.fx / safe_z
    jp[:, 0, 2] = -camera.fx * tx / safe_z ** 2
    jp[:, 1, 1] = camera.fy / safe_z
    jp[:, 1, 2] = -camera.fy * ty / safe_z ** 2
    m = jp @ rot
    cov2d = m @ cov3 @ np.swapaxes(m, 1, 2)
    cov2d[:, 0, 0] += LOW_PASS
    cov2d[:, 1, 1] += LOW_PASS
    mean2d = np.stack([camera.fx * tx / safe_z + camera.cx, camera.fy * ty / safe_z + camera.cy], 1)

    if kept is None:
        rx = SIGMA_EXTENT * np.sqrt(np.maximum(cov2d[:, 0, 0], 0))
        ry = SIGMA_EXTENT * np.sqrt(np.maximum(cov2d[:, 1, 1], 0))
        on_screen = ((mean2d[:, 0] + rx >= 0) & (mean2d[:, 0] - rx <= camera.width - 1)
                     & (mean2d[:, 1] + ry >= 0) & (mean2d[:, 1] - ry <= camera.height - 1))
        kept = np.flatnonzero(depth_ok & on_screen)
    det = cov2d[kept, 0, 0] * cov2d[kept, 1, 1] - cov2d[kept, 0, 1] * cov2d[kept, 1, 0]
    c = cov2d[kept]
    conic = np.empty_like(c)
    conic[:, 0, 0] = c[:, 1, 1] / det
    conic[:, 1, 1] = c[:, 0, 0] / det
    conic[:, 0, 1] = -c[:, 0, 1] / det
    conic[:, 1, 0] = -c[:, 1, 0] / det
    return _Projection(kept, cam[kept], jp[kept], m[kept], cov3[kept], mean2d[kept],
                       cov2d[kept], conic)


def project(gaussian, camera):
    """Project one Gaussian; ``None`` when culled.

    ``gaussian`` needs ``position``, ``covariance``, ``color`` and ``opacity``.
    """
    pos = np.asarray(gaussian.position, dtype=np.float64).reshape(1, 3)
    cov = np.asarray(gaussian.covariance, dtype=np.float64).reshape(1, 3, 3)
    _check_covariances(cov)
    proj = _project(pos, cov, camera)
    if len(proj.kept) == 0:
        return None
    return Splat2D(proj.mean2d[0], proj.cov2d[0], float(proj.cam[0, 2]),
                   np.asarray(gaussian.color, dtype=np.float64), float(gaussian.opacity))


def _make_pairs(proj, positions_depth, camera):
    """Pairs (gaussian, pixel) inside each 3-sigma box, in compositing order."""
    k = len(proj.kept)
    if k == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    mx, my = proj.mean2d[:, 0], proj.mean2d[:, 1]
    rx = SIGMA_EXTENT * np.sqrt(proj.cov2d[:, 0, 0])
    ry = SIGMA_EXTENT * np.sqrt(proj.cov2d[:, 1, 1])
    x0 = np.clip(np.ceil(mx - rx), 0, camera.width - 1).astype(np.int64)
    x1 = np.clip(np.floor(mx + rx), 0, camera.width - 1).astype(np.int64)
    y0 = np.clip(np.ceil(my - ry), 0, camera.height - 1).astype(np.int64)
    y1 = np.clip(np.floor(my + ry), 0, camera.height - 1).astype(np.int64)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    # front-to-back order; ties broken by original Gaussian index
    order = np.lexsort((proj.kept, positions_depth))
    counts = (nx * ny)[order]
    total = int(counts.sum())
    gid = np.repeat(order, counts)
    starts = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(total) - starts
    px = x0[gid] + local % nx[gid]
    py = y0[gid] + local // nx[gid]
    pix = py * camera.width + px
    perm = np.argsort(pix, kind="stable")
    return gid[perm], pix[perm]


def _segments(pix):
    """Start flag and segment id for runs of equal pixel index."""
    new = np.ones(len(pix), dtype=bool)
    new[1:] = pix[1:] != pix[:-1]
    seg = np.cumsum(new) - 1
    return new, seg


def _segment_exclusive_cumsum(x, new, seg):
    cs = np.cumsum(x, axis=0)
    excl = cs - x
    base = excl[new][seg]
    return excl - base


@dataclass(eq=False)
class _Raster:
    proj: _Projection
    footprint: Footprint
    dx: np.ndarray
    dy: np.ndarray
    gauss: np.ndarray  # exp(power)
    alpha: np.ndarray
    clamped: np.ndarray
    trans: np.ndarray  # transmittance before each pair
    t_final: np.ndarray  # (H*W,)
    new: np.ndarray
    seg: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    image: np.ndarray


def _rasterize(gaussians, camera, footprint=None):
    positions = np.asarray(gaussians.positions, dtype=np.float64).reshape(-1, 3)
    covariances = np.asarray(gaussians.covariances, dtype=np.float64).reshape(-1, 3, 3)
    if footprint is None:
        _check_covariances(covariances)
        proj = _project(positions, covariances, camera)
        depth = proj.cam[:, 2]
        gid, pix = _make_pairs(proj, depth, camera)
    else:
        proj = _project(positions, covariances, camera, kept=footprint.kept)
        gid, pix = footprint.pair_gaussian, footprint.pair_pixel
    opacity = np.asarray(gaussians.opacities, dtype=np.float64).reshape(-1)[proj.kept]
    color = np.asarray(gaussians.colors, dtype=np.float64).reshape(-1, 3)[proj.kept]

    n_pix = camera.width * camera.height
    px = (pix % camera.width).astype(np.float64)
    py = (pix // camera.width).astype(np.float64)
    dx = px - proj.mean2d[gid, 0]
    dy = py - proj.mean2d[gid, 1]
    q = proj.conic[gid]
    power = -0.5 * (q[:, 0, 0] * dx * dx + 2.0 * q[:, 0, 1] * dx * dy + q[:, 1, 1] * dy * dy)
    gauss = np.exp(power)
    raw = opacity[gid] * gauss
    clamped = raw > ALPHA_MAX
    alpha = np.where(clamped, ALPHA_MAX, raw)

    new, seg = _segments(pix)
    trans = np.exp(_segment_exclusive_cumsum(np.log1p(-alpha), new, seg))
    if footprint is None:
        included = trans >= T_MIN
        footprint = Footprint(proj.kept, gid, pix, included)
    else:
        included = footprint.included

    after = trans * (1.0 - alpha)
    t_final = np.ones(n_pix)
    np.minimum.at(t_final, pix[included], after[included])
    weight = np.where(included, alpha * trans, 0.0)
    image = np.empty((n_pix, 3))
    for ch in range(3):
        image[:, ch] = np.bincount(pix, weights=weight * color[gid, ch], minlength=n_pix)
    image += t_final[:, None] * camera.background[None, :]
    return _Raster(proj, footprint, dx, dy, gauss, alpha, clamped, trans, t_final, new, seg,
                   opacity, color, image.reshape(camera.height, camera.width, 3)), weight


def render(gaussians, camera, footprint=None):
    """Composite ``gaussians`` front to back into an image.

    Passing the ``footprint`` of an earlier call freezes culling, pixel boxes,
    ordering and early termination.
    """
    raster, weight = _rasterize(gaussians, camera, footprint)
    t_final = raster.t_final.reshape(camera.height, camera.width)
    return RenderOutput(raster.image, 1.0 - t_final, raster.footprint, weight, t_final)


@dataclass(frozen=True, eq=False)
class RenderGradients:
    d_position: np.ndarray  # (N, 3)
    d_covariance: np.ndarray  # (N, 3, 3), symmetric
    d_color: np.ndarray  # (N, 3)
    d_opacity: np.ndarray  # (N,)


def render_backward(gaussians, camera, d_image, footprint=None, raster=None):
    """Exact reverse-mode gradients of ``<d_image, render(gaussians)>``."""
    if raster is None:
        raster, _ = _rasterize(gaussians, camera, footprint)
    n = len(np.asarray(gaussians.positions).reshape(-1, 3))
    d_image = np.asarray(d_image, dtype=np.float64)
    if d_image.shape != (camera.height, camera.width, 3):
        raise ShapeMismatch(f"d_image has shape {d_image.shape}")
    g_img = d_image.reshape(-1, 3)
    proj, fp = raster.proj, raster.footprint
    k = len(proj.kept)
    gid, pix, inc = fp.pair_gaussian, fp.pair_pixel, fp.included
    out_pos = np.zeros((n, 3))
    out_cov = np.zeros((n, 3, 3))
    out_col = np.zeros((n, 3))
    out_opa = np.zeros(n)
    if len(gid) == 0:
        return RenderGradients(out_pos, out_cov, out_col, out_opa)

    alpha, trans = raster.alpha, raster.trans
    gp = g_img[pix]
    weight = np.where(inc, alpha * trans, 0.0)
    # dL/dcolor
    g_col = np.stack([np.bincount(gid, weights=weight * gp[:, ch], minlength=k)
                      for ch in range(3)], axis=1)
    # dL/dalpha via suffix sums of later contributions within the pixel
    a_i = np.einsum("pc,pc->p", raster.color[gid], gp)
    contrib = a_i * weight
    seg_total = np.bincount(raster.seg, weights=contrib)
    inclusive = _segment_exclusive_cumsum(contrib, raster.new, raster.seg) + contrib
    later = seg_total[raster.seg] - inclusive
    bg_term = (g_img @ camera.background)[pix] * raster.t_final[pix]
    g_alpha = a_i * trans - (later + bg_term) / (1.0 - alpha)
    g_alpha = np.where(inc & ~raster.clamped, g_alpha, 0.0)

    g_opa = np.bincount(gid, weights=g_alpha * raster.gauss, minlength=k)
    g_power = g_alpha * alpha
    q = proj.conic[gid]
    dx, dy = raster.dx, raster.dy
    g_mx = np.bincount(gid, weights=g_power * (q[:, 0, 0] * dx + q[:, 0, 1] * dy), minlength=k)
    g_my = np.bincount(gid, weights=g_power * (q[:, 1, 0] * dx + q[:, 1, 1] * dy), minlength=k)
    g_q = np.zeros((k, 2, 2))
    g_q[:, 0, 0] = np.bincount(gid, weights=-0.5 * g_power * dx * dx, minlength=k)
    g_q[:, 1, 1] = np.bincount(gid, weights=-0.5 * g_power * dy * dy, minlength=k)
    g_q[:, 0, 1] = np.bincount(gid, weights=-0.5 * g_power * dx * dy, minlength=k)
    g_q[:, 1, 0] = g_q[:, 0, 1]

    conic = proj.conic
    g_cov2d = -conic @ g_q @ conic
    m = proj.m
    g_cov3 = np.swapaxes(m, 1, 2) @ g_cov2d @ m
    g_m = 2.0 * g_cov2d @ m @ proj.cov3
    g_jp = g_m @ camera.rotation.T

    tx, ty, tz = proj.cam[:, 0], proj.cam[:, 1], proj.cam[:, 2]
    fx, fy = camera.fx, camera.fy
    g_t = np.zeros((k, 3))
    g_t[:, 0] = g_mx * fx / tz + g_jp[:, 0, 2] * (-fx / tz ** 2)
    g_t[:, 1] = g_my * fy / tz + g_jp[:, 1, 2] * (-fy / tz ** 2)
    g_t[:, 2] = (-g_mx * fx * tx / tz ** 2 - g_my * fy * ty / tz ** 2
                 - g_jp[:, 0, 0] * fx / tz ** 2 + g_jp[:, 0, 2] * 2 * fx * tx / tz ** 3
                 - g_jp[:, 1, 1] * fy / tz ** 2 + g_jp[:, 1, 2] * 2 * fy * ty / tz ** 3)

    out_pos[proj.kept] = g_t @ camera.rotation
    out_cov[proj.kept] = g_cov3
    out_col[proj.kept] = g_col
    out_opa[proj.kept] = g_opa
    return RenderGradients(out_pos, out_cov, out_col, out_opa)


def render_with_backward(gaussians, camera, loss_grad_fn):
    """Forward, then backward using ``loss_grad_fn(image) -> (loss, d_image)``."""
    raster, weight = _rasterize(gaussians, camera)
    t_final = raster.t_final.reshape(camera.height, camera.width)
    out = RenderOutput(raster.image, 1.0 - t_final, raster.footprint, weight, t_final)
    loss, d_image = loss_grad_fn(out.image)
    return out, loss, render_backward(gaussians, camera, d_image, raster=raster)


# ---------------------------------------------------------------------------
# image files


def quantize(image):
    """Clamp to [0, 1] and round half up to 8 bits."""
    return np.floor(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(
        np.uint8)


def write_png(path, image):
    arr = quantize(image)
    mode = "L" if arr.ndim == 2 else "RGB"
    Image.fromarray(arr, mode=mode).save(path, format="PNG")


def read_png(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_float_image(path, image):
    np.save(path, np.asarray(image, dtype="<f4"))


def read_float_image(path):
    return np.load(path).astype(np.float64)
