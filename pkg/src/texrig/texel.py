"""UV texel grids: face rasterization, Jacobian fields and bilinear resampling.

Grids are numpy arrays of shape ``(height, width, arity)``. Texel ``(i, j)``
(column ``i``, row ``j``) has its center at ``u = (i + 0.5) / width`` and
``v = (j + 0.5) / height`` and is stored at ``grid[j, i]``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import AllNeighborsInvalid, DataError, IndexOutOfRange
from .mesh import stack_frames

INSIDE_TOL = 1e-10
TXF_MAGIC = b"TXF1"

# Mask byte values in TXF1 containers.
MASK_INVALID, MASK_VALID, MASK_PADDED = 0, 1, 2


@dataclass(frozen=True, eq=False)
class FaceIdMap:
    """Per-texel covering face (``-1`` if none) and barycentric coordinates."""

    face: np.ndarray  # (H, W) int64
    bary: np.ndarray  # (H, W, 3) float64

    @property
    def height(self):
        return self.face.shape[0]

    @property
    def width(self):
        return self.face.shape[1]

    @property
    def mask(self):
        return self.face >= 0


@dataclass(frozen=True, eq=False)
class JacobianField:
    """Texel-space deformation field.

    ``mask`` marks texels covered by a UV face (these host Gaussians).
    ``padded`` marks texels filled by dilation; they take part in bilinear
    blending but never produce Gaussians.
    """

    jacobians: np.ndarray  # (H, W, 3, 3) float32
    translations: np.ndarray  # (H, W, 3) float32
    mask: np.ndarray  # (H, W) bool
    padded: np.ndarray  # (H, W) bool

    @property
    def height(self):
        return self.mask.shape[0]

    @property
    def width(self):
        return self.mask.shape[1]

    @property
    def usable(self):
        return self.mask | self.padded

    def stacked(self):
        """(H, W, 12) array: row-major Jacobian followed by translation."""
        h, w = self.mask.shape
        return np.concatenate([self.jacobians.reshape(h, w, 9), self.translations], axis=-1)

    @classmethod
    def from_stacked(cls, data, mask, padded):
        h, w, _ = data.shape
        data = np.asarray(data, dtype=np.float32)
        return cls(data[..., :9].reshape(h, w, 3, 3).copy(), data[..., 9:12].copy(),
                   np.asarray(mask, bool), np.asarray(padded, bool))


def texel_centers(width, height):
    """UV coordinates of all texel centers, shape (H, W, 2)."""
    u = (np.arange(width) + 0.5) / width
    v = (np.arange(height) + 0.5) / height
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv], axis=-1)


def barycentric(p, a, b, c):
    """Barycentric coordinates of 2D points ``p`` (..., 2) in triangle abc."""
    v0 = b - a
    v1 = c - a
    v2 = p - a
    den = v0[0] * v1[1] - v1[0] * v0[1]
    b1 = (v2[..., 0] * v1[1] - v1[0] * v2[..., 1]) / den
    b2 = (v0[0] * v2[..., 1] - v2[..., 0] * v0[1]) / den
    return np.stack([1.0 - b1 - b2, b1, b2], axis=-1)


def rasterize_faces(mesh, width, height):
    """Assign each texel center to the lowest-index UV triangle containing it.

    Edges are inclusive. UV triangles with zero area cover nothing.
    """
    if width < 2 or height < 2:
        raise ValueError("texel grid must be at least 2x2")
    face = np.full((height, width), -1, dtype=np.int64)
    bary = np.zeros((height, width, 3), dtype=np.float64)
    uv = mesh.uv_coords
    for f in range(mesh.n_faces):
        a, b, c = uv[mesh.uv_faces[f]]
        if abs((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])) < 1e-300:
            continue
        lo = np.minimum(np.minimum(a, b), c)
        hi = np.maximum(np.maximum(a, b), c)
        i0 = max(int(np.floor(lo[0] * width - 0.5)), 0)
        i1 = min(int(np.ceil(hi[0] * width - 0.5)), width - 1)
        j0 = max(int(np.floor(lo[1] * height - 0.5)), 0)
        j1 = min(int(np.ceil(hi[1] * height - 0.5)), height - 1)
        if i1 < i0 or j1 < j0:
            continue
        ii = np.arange(i0, i1 + 1)
        jj = np.arange(j0, j1 + 1)
        pu = (ii + 0.5) / width
        pv = (jj + 0.5) / height
        p = np.stack(np.broadcast_arrays(pu[None, :], pv[:, None]), axis=-1)
        bc = barycentric(p, a, b, c)
        inside = np.all(bc >= -INSIDE_TOL, axis=-1)
        free = face[j0:j1 + 1, i0:i1 + 1] < 0
        hit = inside & free
        if not hit.any():
            continue
        sub_face = face[j0:j1 + 1, i0:i1 + 1]
        sub_bary = bary[j0:j1 + 1, i0:i1 + 1]
        sub_face[hit] = f
        sub_bary[hit] = bc[hit]
    return FaceIdMap(face, bary)


def build_jacobian_field(frames, face_map):
    """Piecewise-constant field: each covered texel copies its face's frame."""
    if isinstance(frames, tuple):
        jac, trans = frames
    else:
        jac, trans = stack_frames(frames)
    mask = face_map.mask
    ids = face_map.face[mask]
    if ids.size and ids.max() >= len(jac):
        raise IndexOutOfRange(f"face map references face {ids.max()} but only {len(jac)} frames")
    h, w = mask.shape
    jf = np.zeros((h, w, 3, 3), dtype=np.float32)
    tf = np.zeros((h, w, 3), dtype=np.float32)
    jf[mask] = jac[ids]
    tf[mask] = trans[ids]
    return JacobianField(jf, tf, mask.copy(), np.zeros_like(mask))


_NEIGHBOURS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def _shift(a, dj, di, fill):
    """``out[j, i] = a[j + dj, i + di]`` with ``fill`` outside the grid."""
    out = np.full_like(a, fill)
    h, w = a.shape[:2]
    sj_dst = slice(max(-dj, 0), h - max(dj, 0))
    si_dst = slice(max(-di, 0), w - max(di, 0))
    sj_src = slice(max(dj, 0), h + min(dj, 0))
    si_src = slice(max(di, 0), w + min(di, 0))
    out[sj_dst, si_dst] = a[sj_src, si_src]
    return out


def dilate_grid(values, usable, rings):
    """Grow ``values`` into unusable texels by averaging usable 8-neighbours.

    Returns ``(values, newly_filled)``; each ring sees the previous ring's
    output.
    """
    values = np.array(values, dtype=np.float64)
    usable = usable.copy()
    filled = np.zeros_like(usable)
    for _ in range(rings):
        acc = np.zeros_like(values)
        cnt = np.zeros(usable.shape, dtype=np.int64)
        for dj, di in _NEIGHBOURS:
            nb_ok = _shift(usable, dj, di, False)
            acc += np.where(nb_ok[..., None], _shift(values, dj, di, 0.0), 0.0)
            cnt += nb_ok
        grow = (~usable) & (cnt > 0)
        if not grow.any():
            break
        values[grow] = acc[grow] / cnt[grow][:, None]
        usable |= grow
        filled |= grow
    return values, filled


def dilate_field(field, rings):
    if rings < 0:
        raise ValueError("rings must be >= 0")
    if rings == 0:
        return field
    h, w = field.mask.shape
    stacked = field.stacked().astype(np.float64)
    values, filled = dilate_grid(stacked, field.usable, rings)
    values = np.where(filled[..., None], values, stacked).astype(np.float32)
    out = JacobianField.from_stacked(values, field.mask.copy(), field.padded | filled)
    # untouched texels keep their original bits
    keep = ~filled
    out.jacobians[keep] = field.jacobians[keep]
    out.translations[keep] = field.translations[keep]
    return out


def _axis_taps(coord, n):
    """Clamp-to-edge linear taps along one axis for center-convention sampling."""
    x = np.clip(coord * n - 0.5, 0.0, n - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), max(n - 2, 0))
    frac = x - x0
    x1 = np.minimum(x0 + 1, n - 1)
    return x0, x1, frac


def bilinear_taps(u, v, width, height, usable=None):
    """Flat texel indices (..., 4), weights (..., 4) and an ok flag (...).

    Weights of unusable texels are zeroed and the rest renormalised; ``ok`` is
    False where every contributing texel is unusable.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    x0, x1, fx = _axis_taps(u, width)
    y0, y1, fy = _axis_taps(v, height)
    idx = np.stack([y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1], axis=-1)
    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1)
    if usable is None:
        return idx, w, np.ones(u.shape, dtype=bool)
    keep = np.asarray(usable, bool).reshape(-1)[idx]
    dropped = np.any(~keep & (w > 0), axis=-1)
    w = np.where(keep, w, 0.0)
    total = w.sum(axis=-1)
    ok = total > 0
    # only touch weights when something was dropped, so all-valid taps stay exact
    renorm = dropped & ok
    w = np.where(renorm[..., None], w / np.where(ok, total, 1.0)[..., None], w)
    return idx, w, ok


def sample_bilinear(grid, mask, u, v, padded=None):
    """Center-convention bilinear sample of ``grid`` at one ``(u, v)``."""
    if not (0.0 <= u <= 1.0 and 0.0 <= v <= 1.0):
        raise ValueError(f"sample point ({u}, {v}) outside [0,1]^2")
    grid = np.asarray(grid)
    h, w = grid.shape[:2]
    usable = None
    if mask is not None:
        usable = np.asarray(mask, bool)
        if padded is not None:
            usable = usable | np.asarray(padded, bool)
    idx, wts, ok = bilinear_taps(u, v, w, h, usable)
    if not ok:
        raise AllNeighborsInvalid(message=f"all bilinear neighbours invalid at uv ({u}, {v})")
    flat = grid.reshape(h * w, -1).astype(np.float64)
    out = wts @ flat[idx]
    return out.reshape(grid.shape[2:]) if grid.ndim > 2 else out[0]


@dataclass(frozen=True, eq=False)
class ResampleOperator:
    """Sparse linear map for corner-lattice resampling; ``ok`` flags outputs."""

    matrix: sp.csr_matrix
    ok: np.ndarray  # (H, W) bool
    shape: tuple

    def apply(self, grid):
        h, w = self.shape
        flat = np.asarray(grid, dtype=np.float64).reshape(h * w, -1)
        return (self.matrix @ flat).reshape(np.shape(grid))

    def adjoint(self, grad):
        h, w = self.shape
        flat = np.asarray(grad, dtype=np.float64).reshape(h * w, -1)
        return (self.matrix.T @ flat).reshape(np.shape(grad))


def corner_lattice_operator(width, height, usable=None):
    """Operator sampling texel ``(i, j)`` at ``(i / (W-1), j / (H-1))``."""
    if width < 2 or height < 2:
        raise ValueError("corner lattice resampling needs at least 2x2 texels")
    u = np.arange(width) / (width - 1)
    v = np.arange(height) / (height - 1)
    uu, vv = np.meshgrid(u, v)
    idx, w, ok = bilinear_taps(uu, vv, width, height, usable)
    n = width * height
    rows = np.repeat(np.arange(n), 4)
    mat = sp.csr_matrix((w.reshape(-1), (rows, idx.reshape(-1))), shape=(n, n))
    return ResampleOperator(mat, ok, (height, width))


def corner_lattice_resample(grid, mask=None, padded=None):
    """Resample a grid onto the corner-aligned lattice at the same resolution.

    Returns ``(resampled, ok)``; texels whose neighbours are all invalid come
    back as zeros with ``ok`` False.
    """
    grid = np.asarray(grid)
    h, w = grid.shape[:2]
    usable = None
    if mask is not None:
        usable = np.asarray(mask, bool) if padded is None else (np.asarray(mask, bool) | padded)
    op = corner_lattice_operator(w, h, usable)
    out = op.apply(grid)
    out[~op.ok] = 0.0
    return out, op.ok


# ---------------------------------------------------------------------------
# TXF1 container


def _mask_bytes(mask, padded):
    code = np.full(mask.shape, MASK_INVALID, dtype=np.uint8)
    if padded is not None:
        code[padded] = MASK_PADDED
    code[mask] = MASK_VALID
    return code


def write_txf_record(fh, data, mask, padded=None):
    data = np.asarray(data)
    if data.ndim == 2:
        data = data[..., None]
    h, w, arity = data.shape
    fh.write(TXF_MAGIC + struct.pack("<III", w, h, arity))
    fh.write(_mask_bytes(np.asarray(mask, bool), padded).tobytes())
    fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_txf_record(fh):
    """Returns ``(data (H,W,A) float32, mask, padded)`` or None at EOF."""
    head = fh.read(16)
    if not head:
        return None
    if len(head) < 16 or head[:4] != TXF_MAGIC:
        raise DataError("not a TXF1 container")
    w, h, arity = struct.unpack("<III", head[4:])
    code = np.frombuffer(fh.read(w * h), dtype=np.uint8)
    raw = fh.read(4 * w * h * arity)
    if code.size != w * h or len(raw) != 4 * w * h * arity:
        raise DataError("truncated TXF1 container")
    data = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(h, w, arity)
    code = code.reshape(h, w)
    return data, code == MASK_VALID, code == MASK_PADDED


def write_field(path, field):
    with open(path, "wb") as fh:
        write_txf_record(fh, field.stacked(), field.mask, field.padded)


def read_field(path):
    with open(path, "rb") as fh:
        rec = read_txf_record(fh)
    if rec is None:
        raise DataError(f"{path}: empty container")
    data, mask, padded = rec
    if data.shape[-1] != 12:
        raise DataError(f"{path}: expected arity 12, found {data.shape[-1]}")
    return JacobianField.from_stacked(data, mask, padded)


def write_sections(path, sections, mask, padded=None):
    """Several named grids sharing one mask: ``u16 name length, name, record``."""
    with open(path, "wb") as fh:
        for name, data in sections.items():
            key = name.encode("utf-8")
            fh.write(struct.pack("<H", len(key)) + key)
            write_txf_record(fh, data, mask, padded)


def read_sections(path):
    out = {}
    mask = padded = None
    with open(path, "rb") as fh:
        while True:
            head = fh.read(2)
            if not head:
                break
            (n,) = struct.unpack("<H", head)
            name = fh.read(n).decode("utf-8")
            rec = read_txf_record(fh)
            if rec is None:
                raise DataError(f"{path}: missing record for section {name!r}")
            out[name], mask, padded = rec
    return out, mask, padded
