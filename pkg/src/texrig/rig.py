"""Local texel-space Gaussian attributes and their lifting into world space.

Two lifts are provided:

``lift_naive``
    every covered texel uses the frame of the face it lies in:
    ``mu = J_F @ mu_l + T_F`` and ``Sigma = J_F @ Sigma_l @ J_F.T``.
``lift_quasi_phong``
    the per-texel affine results ``J_uv @ mu_l + T_uv`` and
    ``J_uv @ Sigma_l @ J_uv.T`` are computed on the whole (dilated) field and
    then blended by corner-lattice bilinear resampling, which smooths the
    piecewise-constant Jacobians across face boundaries.

Both return a :class:`GlobalGaussianSet` and, through :func:`lift_with_cache`,
the intermediates needed by :func:`lift_backward`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial.transform import Rotation

from . import texel
from .errors import AllNeighborsInvalid, DataError, NonPSD, ShapeMismatch, ZeroQuaternion
from .mesh import stack_frames

SH_C0 = 0.28209479177387814
QUAT_EPS = 1e-8
GEOMETRY_CHANNELS = (("position", 3), ("rotation", 4), ("log_scale", 3), ("opacity", 1))
COLOR_CHANNELS = (("color", 3),)
SECTION_NAMES = ("position", "rotation", "log_scale", "opacity", "color")

# Test-only fault injection; validate() flips this to check that the
# finite-difference suite notices a broken covariance pullback.
_FAULTS = {"cov_pullback_sign": 1.0}


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p, eps=1e-7):
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True, eq=False)
class LocalAttributeMaps:
    """Raw (pre-activation) texel maps sharing one validity mask.

    The geometry block is 3 + 4 + 3 + 1 = 11 channels (position, quaternion
    ``(w, x, y, z)``, log-scale, opacity logit); color is a separate 3-channel
    logit map. Positions are in rest-mesh units.
    """

    position: np.ndarray  # (H, W, 3)
    rotation: np.ndarray  # (H, W, 4)
    log_scale: np.ndarray  # (H, W, 3)
    opacity: np.ndarray  # (H, W, 1)
    color: np.ndarray  # (H, W, 3)
    mask: np.ndarray  # (H, W) bool

    def __post_init__(self):
        h, w = np.shape(self.mask)
        for name, arity in GEOMETRY_CHANNELS + COLOR_CHANNELS:
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape == (h, w) and arity == 1:
                arr = arr[..., None]
            if arr.shape != (h, w, arity):
                raise ShapeMismatch(f"{name} map has shape {arr.shape}, expected {(h, w, arity)}")
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "mask", np.asarray(self.mask, bool))

    @property
    def height(self):
        return self.mask.shape[0]

    @property
    def width(self):
        return self.mask.shape[1]

    def arrays(self):
        return {name: getattr(self, name) for name in SECTION_NAMES}

    def replace(self, **maps):
        return replace(self, **maps)

    def copy(self):
        return self.replace(**{k: v.copy() for k, v in self.arrays().items()})

    def geometry_map(self):
        """The 11-channel geometry layout."""
        return np.concatenate([self.position, self.rotation, self.log_scale, self.opacity], axis=-1)

    @classmethod
    def from_geometry_map(cls, geometry, color, mask):
        geometry = np.asarray(geometry, dtype=np.float64)
        if geometry.shape[-1] != 11:
            raise ShapeMismatch(f"geometry map needs 11 channels, got {geometry.shape[-1]}")
        return cls(geometry[..., 0:3], geometry[..., 3:7], geometry[..., 7:10],
                   geometry[..., 10:11], color, mask)

    @classmethod
    def constant(cls, mask, position=(0.0, 0.0, 0.0), rotation=(1.0, 0.0, 0.0, 0.0),
                 scale=0.05, opacity=0.9, color=(0.5, 0.5, 0.5)):
        """Uniform maps from activated values (scale may be a scalar or 3-vector)."""
        mask = np.asarray(mask, bool)
        h, w = mask.shape

        def fill(value, arity):
            return np.broadcast_to(np.asarray(value, dtype=np.float64), (h, w, arity)).copy()

        return cls(fill(position, 3), fill(rotation, 4),
                   fill(np.log(np.broadcast_to(scale, (3,))), 3),
                   fill(logit(opacity), 1), fill(logit(color), 3), mask)

    @classmethod
    def surface_init(cls, rest_mesh, face_map, scale=None, opacity=0.9, color=(0.5, 0.5, 0.5)):
        """Place each Gaussian on the rest surface point of its texel.

        Local positions are offsets from the covering face's rest centroid, so
        either lift reproduces the deformed surface point. ``scale`` defaults
        to the rest-space texel spacing.
        """
        mask = face_map.mask
        if scale is None:
            n_valid = max(int(mask.sum()), 1)
            covered = rest_mesh.areas[np.unique(face_map.face[mask])].sum() if mask.any() else 1.0
            scale = 0.5 * math.sqrt(covered / n_valid)
        maps = cls.constant(mask, scale=scale, opacity=opacity, color=color)
        if mask.any():
            ids = face_map.face[mask]
            corners = rest_mesh.vertices[rest_mesh.faces[ids]]
            point = np.einsum("nk,nkc->nc", face_map.bary[mask], corners)
            maps.position[mask] = point - corners.mean(axis=1)
        return maps

    def save(self, path):
        texel.write_sections(path, self.arrays(), self.mask)

    @classmethod
    def load(cls, path):
        sections, mask, _ = texel.read_sections(path)
        missing = [n for n in SECTION_NAMES if n not in sections]
        if missing:
            raise DataError(f"{path}: missing sections {missing}")
        return cls(*(sections[n].astype(np.float64) for n in SECTION_NAMES), mask)


@dataclass(frozen=True)
class Gaussian:
    position: np.ndarray
    covariance: np.ndarray
    color: np.ndarray
    opacity: float


@dataclass(frozen=True, eq=False)
class GlobalGaussianSet:
    positions: np.ndarray  # (N, 3)
    covariances: np.ndarray  # (N, 3, 3)
    colors: np.ndarray  # (N, 3)
    opacities: np.ndarray  # (N,)
    source_texel: np.ndarray  # (N, 2) as (i, j)

    def __len__(self):
        return len(self.positions)

    def __getitem__(self, i):
        return Gaussian(self.positions[i], self.covariances[i], self.colors[i],
                        float(self.opacities[i]))

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros((0, 3)), np.zeros(0),
                   np.zeros((0, 2), dtype=np.int64))

    def check_psd(self, sym_tol=1e-7, eig_tol=1e-9):
        """Raise NonPSD on the first covariance breaking symmetry or PSD."""
        cov = self.covariances
        if not len(cov):
            return
        scale = np.maximum(np.abs(cov).max(axis=(1, 2)), 1.0)
        asym = np.abs(cov - np.swapaxes(cov, 1, 2)).max(axis=(1, 2))
        bad = np.flatnonzero(asym > sym_tol * scale)
        if len(bad):
            raise NonPSD(f"covariance {bad[0]} is not symmetric (|S-S^T| = {asym[bad[0]]:.3e})")
        eig = np.linalg.eigvalsh(0.5 * (cov + np.swapaxes(cov, 1, 2)))
        trace = np.trace(cov, axis1=1, axis2=2)
        bad = np.flatnonzero(eig[:, 0] < -eig_tol * np.abs(trace))
        if len(bad) or not np.all(np.isfinite(eig)):
            i = bad[0] if len(bad) else int(np.argmax(~np.isfinite(eig).all(axis=1)))
            raise NonPSD(f"covariance {i} has eigenvalue {eig[i, 0]:.3e}")


# ---------------------------------------------------------------------------
# activations and covariance assembly


def quat_to_rotmat(q):
    """Rotation matrices from unit quaternions ``(w, x, y, z)``, shape (..., 3, 3)."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def _rotmat_backward(q, g):
    """Pull a gradient on R back onto the (unit) quaternion components."""
    w, x, y, z = np.moveaxis(q, -1, 0)
    g00, g01, g02 = g[..., 0, 0], g[..., 0, 1], g[..., 0, 2]
    g10, g11, g12 = g[..., 1, 0], g[..., 1, 1], g[..., 1, 2]
    g20, g21, g22 = g[..., 2, 0], g[..., 2, 1], g[..., 2, 2]
    gw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    gx = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12 + z * g20 + w * g21 - 2 * x * g22)
    gy = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2 * y * g22)
    gz = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11 + y * g12 + x * g20 + y * g21)
    return np.stack([gw, gx, gy, gz], -1)


def normalize_quaternions(q, texels=None):
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1)
    small = ~(norm > QUAT_EPS)
    if np.any(small):
        first = np.unravel_index(int(np.argmax(small)), small.shape)
        where = tuple(int(t) for t in texels[first]) if texels is not None else first
        raise ZeroQuaternion(where)
    return q / norm[..., None], norm


def local_covariances(rotation_raw, log_scale_raw, texels=None):
    """Batched ``R S S^T R^T`` from raw quaternions and log-scales."""
    qn, _ = normalize_quaternions(rotation_raw, texels)
    rot = quat_to_rotmat(qn)
    s2 = np.exp(2.0 * np.asarray(log_scale_raw, dtype=np.float64))
    return np.einsum("...ik,...k,...jk->...ij", rot, s2, rot)


def assemble_local_covariance(rotation_raw, log_scale_raw):
    """Local covariance of one Gaussian."""
    rotation_raw = np.asarray(rotation_raw, dtype=np.float64).reshape(4)
    return local_covariances(rotation_raw, np.asarray(log_scale_raw, dtype=np.float64).reshape(3))


def covariance_backward(rotation_raw, log_scale_raw, g_cov):
    """Gradients of ``<g_cov, Sigma_l>`` wrt raw quaternion and log-scale."""
    qn, norm = normalize_quaternions(rotation_raw)
    rot = quat_to_rotmat(qn)
    s2 = np.exp(2.0 * np.asarray(log_scale_raw, dtype=np.float64))
    g = 0.5 * (g_cov + np.swapaxes(g_cov, -1, -2))
    # Sigma = R diag(s^2) R^T
    g_rot = 2.0 * np.einsum("...ij,...jk,...k->...ik", g, rot, s2)
    rgr = np.einsum("...ji,...jk,...ki->...i", rot, g, rot)
    g_log_scale = 2.0 * s2 * rgr
    g_qn = _rotmat_backward(qn, g_rot)
    g_q = (g_qn - qn * np.sum(qn * g_qn, axis=-1, keepdims=True)) / norm[..., None]
    return g_q, g_log_scale


# ---------------------------------------------------------------------------
# lifting


@dataclass(eq=False)
class LiftCache:
    variant: str
    shape: tuple
    texel_index: np.ndarray  # flat indices of texels whose local values are used
    valid_index: np.ndarray  # flat indices of texels that became Gaussians
    jacobians: np.ndarray  # (len(texel_index), 3, 3) float64
    operator: texel.ResampleOperator | None
    rotation_raw: np.ndarray
    log_scale_raw: np.ndarray
    opacity: np.ndarray
    color: np.ndarray


def _texel_coords(flat_index, width):
    return np.stack([flat_index % width, flat_index // width], axis=-1)


def _flat(maps, name):
    arr = getattr(maps, name)
    return arr.reshape(-1, arr.shape[-1])


def _finish(maps, positions, covariances, valid_index):
    opacity = sigmoid(_flat(maps, "opacity")[valid_index, 0])
    color = sigmoid(_flat(maps, "color")[valid_index])
    covariances = 0.5 * (covariances + np.swapaxes(covariances, -1, -2))
    return GlobalGaussianSet(positions, covariances, color, opacity,
                             _texel_coords(valid_index, maps.width)), opacity, color


def _check_resolution(maps, shape):
    if tuple(maps.mask.shape) != tuple(shape):
        raise ShapeMismatch(f"maps are {maps.mask.shape}, field/map is {tuple(shape)}")


def lift_naive_with_cache(local, face_map, frames):
    _check_resolution(local, face_map.face.shape)
    jac_f, trans_f = frames if isinstance(frames, tuple) else stack_frames(frames)
    valid = np.flatnonzero(face_map.mask.reshape(-1))
    ids = face_map.face.reshape(-1)[valid]
    if ids.size and ids.max() >= len(jac_f):
        raise DataError(f"face map references face {ids.max()} but only {len(jac_f)} frames")
    jac = np.asarray(jac_f, dtype=np.float64)[ids]
    trans = np.asarray(trans_f, dtype=np.float64)[ids]
    texels = _texel_coords(valid, local.width)
    rot_raw = _flat(local, "rotation")[valid]
    log_s = _flat(local, "log_scale")[valid]
    cov_l = local_covariances(rot_raw, log_s, texels)
    mu_l = _flat(local, "position")[valid]
    positions = np.einsum("nij,nj->ni", jac, mu_l) + trans
    covs = jac @ cov_l @ np.swapaxes(jac, 1, 2)
    gs, opacity, color = _finish(local, positions, covs, valid)
    cache = LiftCache("naive", local.mask.shape, valid, valid, jac, None, rot_raw, log_s,
                      opacity, color)
    return gs, cache


def lift_naive(local, face_map, frames):
    """Per-face lift: each covered texel inherits its face's frame."""
    return lift_naive_with_cache(local, face_map, frames)[0]


_OPERATOR_CACHE = {}


def _operator_for(usable):
    key = (usable.shape, usable.tobytes())
    op = _OPERATOR_CACHE.get(key)
    if op is None:
        if len(_OPERATOR_CACHE) > 64:
            _OPERATOR_CACHE.clear()
        op = texel.corner_lattice_operator(usable.shape[1], usable.shape[0], usable)
        _OPERATOR_CACHE[key] = op
    return op


def lift_quasi_phong_with_cache(local, field):
    _check_resolution(local, field.mask.shape)
    h, w = field.mask.shape
    usable = field.usable
    used = np.flatnonzero(usable.reshape(-1))
    valid = np.flatnonzero(field.mask.reshape(-1))
    jac = field.jacobians.reshape(-1, 3, 3)[used].astype(np.float64)
    trans = field.translations.reshape(-1, 3)[used].astype(np.float64)
    texels = _texel_coords(used, w)
    rot_raw = _flat(local, "rotation")[used]
    log_s = _flat(local, "log_scale")[used]
    cov_l = local_covariances(rot_raw, log_s, texels)
    mu_l = _flat(local, "position")[used]

    cand_pos = np.zeros((h * w, 3))
    cand_cov = np.zeros((h * w, 9))
    cand_pos[used] = np.einsum("nij,nj->ni", jac, mu_l) + trans
    cand_cov[used] = (jac @ cov_l @ np.swapaxes(jac, 1, 2)).reshape(-1, 9)

    op = _operator_for(usable)
    ok = op.ok.reshape(-1)[valid]
    if not np.all(ok):
        bad = valid[int(np.argmax(~ok))]
        raise AllNeighborsInvalid(tuple(int(t) for t in _texel_coords(np.array(bad), w)))
    positions = op.apply(cand_pos)[valid]
    covs = op.apply(cand_cov)[valid].reshape(-1, 3, 3)
    gs, opacity, color = _finish(local, positions, covs, valid)
    cache = LiftCache("quasi_phong", (h, w), used, valid, jac, op, rot_raw, log_s, opacity, color)
    return gs, cache


def lift_quasi_phong(local, field):
    """Blend per-texel affine results over the field, then read out valid texels."""
    return lift_quasi_phong_with_cache(local, field)[0]


def lift_with_cache(local, variant, face_map=None, frames=None, field=None):
    if variant == "naive":
        return lift_naive_with_cache(local, face_map, frames)
    if variant == "quasi_phong":
        return lift_quasi_phong_with_cache(local, field)
    raise ValueError(f"unknown lift variant {variant!r}")


def lift_backward(cache, d_position, d_covariance, d_color, d_opacity):
    """Gradients wrt the raw local maps, as a dict of (H, W, C) arrays."""
    h, w = cache.shape
    n_tex = h * w
    d_covariance = 0.5 * (d_covariance + np.swapaxes(d_covariance, -1, -2))
    if cache.variant == "naive":
        g_pos_tex = d_position
        g_cov_tex = d_covariance
    else:
        full_p = np.zeros((n_tex, 3))
        full_c = np.zeros((n_tex, 9))
        full_p[cache.valid_index] = d_position
        full_c[cache.valid_index] = d_covariance.reshape(-1, 9)
        g_pos_tex = cache.operator.adjoint(full_p)[cache.texel_index]
        g_cov_tex = cache.operator.adjoint(full_c)[cache.texel_index].reshape(-1, 3, 3)
    jac = cache.jacobians
    jt = np.swapaxes(jac, 1, 2)
    g_mu = np.einsum("nij,nj->ni", jt, g_pos_tex)
    g_cov_l = _FAULTS["cov_pullback_sign"] * (jt @ g_cov_tex @ jac)
    g_q, g_ls = covariance_backward(cache.rotation_raw, cache.log_scale_raw, g_cov_l)

    out = {name: np.zeros((n_tex, arity)) for name, arity in GEOMETRY_CHANNELS + COLOR_CHANNELS}
    out["position"][cache.texel_index] = g_mu
    out["rotation"][cache.texel_index] = g_q
    out["log_scale"][cache.texel_index] = g_ls
    out["opacity"][cache.valid_index, 0] = d_opacity * cache.opacity * (1.0 - cache.opacity)
    out["color"][cache.valid_index] = d_color * cache.color * (1.0 - cache.color)
    return {k: v.reshape(h, w, -1) for k, v in out.items()}


def local_position_pullback(cache, d_position):
    """Per-texel local-position gradient from world-space position gradients only."""
    zeros3 = np.zeros((len(d_position), 3, 3))
    grads = lift_backward(cache, d_position, zeros3, np.zeros((len(d_position), 3)),
                          np.zeros(len(d_position)))
    return grads["position"]


# ---------------------------------------------------------------------------
# export


_PLY_FIELDS = ("x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
               "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3")


def covariance_to_scale_rotation(covariances):
    """Eigen-decompose covariances into log-scales and ``(w, x, y, z)`` quaternions.

    Eigenvalues are sorted in descending order; the last axis is flipped when
    needed so the eigenvector basis is a proper rotation.
    """
    cov = 0.5 * (covariances + np.swapaxes(covariances, -1, -2))
    evals, evecs = np.linalg.eigh(cov)
    # descending, keeping eigh's order among ties so the identity stays the identity
    order = np.argsort(-evals, axis=1, kind="stable")
    evals = np.take_along_axis(evals, order, axis=1)
    evecs = np.take_along_axis(evecs, order[:, None, :], axis=2)
    flip = np.linalg.det(evecs) < 0
    evecs[flip, :, 2] *= -1.0
    trace = np.maximum(evals.sum(axis=1, keepdims=True), 1e-300)
    evals = np.maximum(evals, 1e-15 * trace)
    log_scale = 0.5 * np.log(evals)
    xyzw = Rotation.from_matrix(evecs).as_quat()
    quat = np.concatenate([xyzw[:, 3:], xyzw[:, :3]], axis=1)
    quat *= np.where(quat[:, :1] < 0, -1.0, 1.0)
    return log_scale, quat


def export_gaussians(gaussians, path):
    """Write a binary little-endian PLY in the common splatting layout (SH degree 0)."""
    gaussians.check_psd()
    n = len(gaussians)
    log_scale, quat = covariance_to_scale_rotation(gaussians.covariances) if n else (
        np.zeros((0, 3)), np.zeros((0, 4)))
    table = np.zeros((n, len(_PLY_FIELDS)), dtype="<f4")
    table[:, 0:3] = gaussians.positions
    table[:, 6:9] = (gaussians.colors - 0.5) / SH_C0
    table[:, 9] = logit(gaussians.opacities)
    table[:, 10:13] = log_scale
    table[:, 13:17] = quat
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in _PLY_FIELDS]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(table.tobytes())


def import_gaussians(path):
    """Read a PLY written by :func:`export_gaussians` (float properties only)."""
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise DataError(f"{path}: not a PLY file")
        names, n = [], None
        while True:
            line = fh.readline()
            if not line:
                raise DataError(f"{path}: truncated header")
            parts = line.decode("ascii").split()
            if parts[:2] == ["element", "vertex"]:
                n = int(parts[2])
            elif parts and parts[0] == "property":
                if parts[1] != "float":
                    raise DataError(f"{path}: unsupported property type {parts[1]}")
                names.append(parts[2])
            elif parts and parts[0] == "format" and parts[1] != "binary_little_endian":
                raise DataError(f"{path}: unsupported format {parts[1]}")
            elif parts == ["end_header"]:
                break
        raw = fh.read(4 * len(names) * n)
    if n is None or len(raw) != 4 * len(names) * n:
        raise DataError(f"{path}: truncated body")
    table = np.frombuffer(raw, dtype="<f4").reshape(n, len(names)).astype(np.float64)
    col = {name: table[:, k] for k, name in enumerate(names)}
    positions = np.stack([col["x"], col["y"], col["z"]], axis=1)
    log_scale = np.stack([col[f"scale_{k}"] for k in range(3)], axis=1)
    quat = np.stack([col[f"rot_{k}"] for k in range(4)], axis=1)
    covs = local_covariances(quat, log_scale) if n else np.zeros((0, 3, 3))
    colors = 0.5 + SH_C0 * np.stack([col[f"f_dc_{k}"] for k in range(3)], axis=1)
    return GlobalGaussianSet(positions, covs, colors, sigmoid(col["opacity"]),
                             np.zeros((n, 2), dtype=np.int64))

