"""Total objective over rendered frames and an Adam loop on raw texel maps.

The gradient of the objective flows image -> renderer backward -> lift
pullback (``J^T g`` for positions, ``J^T G J`` for covariances, transposed
bilinear weights for the blended variant) -> activations.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .errors import NonFiniteLoss
from .mesh import Variant, frame_arrays, load_pair
from .render import _rasterize, render, render_backward
from .rig import lift_backward, lift_with_cache
from .texel import build_jacobian_field, dilate_field, rasterize_faces

log = logging.getLogger(__name__)

PARAM_GROUPS = ("position", "rotation", "log_scale", "opacity", "color")
DEFAULT_LR = {"position": 1.6e-4, "rotation": 1e-3, "log_scale": 1e-3,
              "opacity": 5e-2, "color": 2.5e-3}


@dataclass
class LossWeights:
    """Objective weights; ``eps_mu``/``eps_s`` of ``None`` resolve against the mesh."""

    lambda_l1: float = 0.8
    lambda_ssim: float = 0.2
    lambda_reg_mu: float = 0.01
    lambda_reg_s: float = 1.0
    eps_mu: float | None = None
    eps_s: float | None = None

    def __post_init__(self):
        for name in ("lambda_l1", "lambda_ssim", "lambda_reg_mu", "lambda_reg_s"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def resolved(self, rest_mesh):
        """Copy with bounds filled in: 1.0 and 0.6 mean rest edge lengths."""
        edge = rest_mesh.mean_edge_length()
        return LossWeights(self.lambda_l1, self.lambda_ssim, self.lambda_reg_mu, self.lambda_reg_s,
                           1.0 * edge if self.eps_mu is None else self.eps_mu,
                           0.6 * edge if self.eps_s is None else self.eps_s)


@dataclass
class Frame:
    deformed: object  # TriMesh
    camera: object  # Camera
    target: np.ndarray | None = None


@dataclass
class FitConfig:
    rest: object  # TriMesh
    frames: list
    iterations: int = 100
    learning_rates: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-15
    seed: int = 0
    dilation_rings: int = 2
    variant: str = "quasi_phong"
    frame_variant: Variant = Variant.FULL_JACOBIAN
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.variant not in ("naive", "quasi_phong"):
            raise ValueError(f"unknown variant {self.variant!r}")


@dataclass(eq=False)
class PreparedFrame:
    face_map: object
    frames: tuple  # (J, T) float64 arrays
    field: object
    camera: object
    target: np.ndarray | None


@dataclass(eq=False)
class Scene:
    rest: object
    face_map: object
    frames: list  # PreparedFrame

    @property
    def shape(self):
        return self.face_map.face.shape


def prepare_scene(rest, frames, width, height, dilation_rings=2,
                  frame_variant=Variant.FULL_JACOBIAN):
    """Rasterize the UV layout once and build each frame's deformation field."""
    face_map = rasterize_faces(rest, width, height)
    prepared = []
    for fr in frames:
        pair = load_pair(rest, fr.deformed)
        jac, trans = frame_arrays(pair, frame_variant)
        fld = dilate_field(build_jacobian_field((jac, trans), face_map), dilation_rings)
        target = None if fr.target is None else np.asarray(fr.target, dtype=np.float64)
        prepared.append(PreparedFrame(face_map, (jac, trans), fld, fr.camera, target))
    return Scene(rest, face_map, prepared)


def lift_frame(local, frame, variant):
    return lift_with_cache(local, variant, face_map=frame.face_map, frames=frame.frames,
                           field=frame.field)


def render_frames(local, scene, variant="quasi_phong"):
    return [render(lift_frame(local, fr, variant)[0], fr.camera).image for fr in scene.frames]


def recon_loss(image, target, weights):
    """``lambda_l1 * L1 + lambda_ssim * (1 - SSIM)`` and its image gradient."""
    l1, g1 = losses.loss_l1_grad(image, target)
    ls, gs = losses.loss_ssim_grad(image, target)
    total = weights.lambda_l1 * l1 + weights.lambda_ssim * ls
    return total, weights.lambda_l1 * g1 + weights.lambda_ssim * gs, l1, ls


@dataclass(eq=False)
class LossResult:
    total: float
    l1: float
    ssim: float
    reg_mu: float
    reg_s: float
    grads: dict
    images: list


def total_loss(local, scene, weights, variant="quasi_phong", footprints=None, with_grad=True):
    """Objective averaged over frames plus weighted regularizers.

    ``weights`` must have resolved bounds. ``footprints`` (one per frame)
    freeze the rasterizer's discrete decisions; the footprints actually used
    are returned in ``LossResult.images`` order via ``result.footprints``.
    """
    n = len(scene.frames)
    grads = {name: np.zeros_like(arr) for name, arr in local.arrays().items()}
    total = l1_sum = ssim_sum = 0.0
    images, used = [], []
    for k, fr in enumerate(scene.frames):
        gs, cache = lift_frame(local, fr, variant)
        raster, _ = _rasterize(gs, fr.camera, None if footprints is None else footprints[k])
        used.append(raster.footprint)
        images.append(raster.image)
        rec, d_img, l1, ls = recon_loss(raster.image, fr.target, weights)
        total += rec / n
        l1_sum += l1 / n
        ssim_sum += ls / n
        if with_grad:
            rg = render_backward(gs, fr.camera, d_img / n, raster=raster)
            g = lift_backward(cache, rg.d_position, rg.d_covariance, rg.d_color, rg.d_opacity)
            for name in grads:
                grads[name] += g[name]
    reg_mu, g_mu = losses.loss_reg_position(local, weights.eps_mu, grad=True)
    reg_s, g_s = losses.loss_reg_scale(local, weights.eps_s, grad=True)
    total += weights.lambda_reg_mu * reg_mu + weights.lambda_reg_s * reg_s
    if with_grad:
        grads["position"] += weights.lambda_reg_mu * g_mu
        grads["log_scale"] += weights.lambda_reg_s * g_s
    result = LossResult(total, l1_sum, ssim_sum, reg_mu, reg_s, grads, images)
    result.footprints = used
    return result


class Adam:
    """Adam with bias correction and per-group learning rates."""

    def __init__(self, params, learning_rates, betas=(0.9, 0.999), eps=1e-15):
        self.lr = dict(learning_rates)
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.b1 ** t
        c2 = 1.0 - self.b2 ** t
        out = {}
        for name, p in params.items():
            g = grads[name]
            m = self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            v = self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            out[name] = p - self.lr.get(name, 0.0) * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


TRACE_FIELDS = ("iteration", "total", "l1", "ssim", "reg_mu", "reg_s")


def fit(config, initial, scene=None, callback=None):
    """Optimise raw maps for ``config.iterations`` Adam steps.

    Returns ``(maps, trace)``; ``trace`` rows hold the objective evaluated
    before each update. Deterministic for fixed inputs.
    """
    if config.iterations == 0:
        return initial, []
    if scene is None:
        scene = prepare_scene(config.rest, config.frames, initial.width, initial.height,
                              config.dilation_rings, config.frame_variant)
    weights = config.weights.resolved(config.rest)
    params = {k: v.copy() for k, v in initial.arrays().items()}
    opt = Adam(params, config.learning_rates, config.betas, config.adam_eps)
    trace = []
    local = initial
    for it in range(config.iterations):
        local = initial.replace(**params)
        res = total_loss(local, scene, weights, config.variant)
        if not np.isfinite(res.total) or not all(np.all(np.isfinite(g)) for g in res.grads.values()):
            raise NonFiniteLoss(it, res.total)
        trace.append((it, res.total, res.l1, res.ssim, res.reg_mu, res.reg_s))
        if callback is not None:
            callback(it, res)
        params = opt.step(params, res.grads)
        if it % 100 == 0:
            log.debug("iteration %d loss %.6f", it, res.total)
    return initial.replace(**params), trace


def write_trace(path, trace):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_FIELDS)
        for row in trace:
            writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def read_trace(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return [(int(r[0]), *map(float, r[1:])) for r in rows[1:]]


def perturb(local, amplitude, seed):
    """Add uniform noise in ``[-amplitude, amplitude]`` to every raw channel."""
    rng = np.random.default_rng(seed)
    return local.replace(**{name: arr + rng.uniform(-amplitude, amplitude, arr.shape)
                            for name, arr in local.arrays().items()})
