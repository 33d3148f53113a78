"""Measure position and covariance jumps between texels on either side of a face boundary."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import NoSeams
from .mesh import Variant, frame_arrays, load_pair
from .rig import LocalAttributeMaps, lift_naive, lift_quasi_phong
from .texel import build_jacobian_field, dilate_field, rasterize_faces

VARIANTS = ("naive", "quasi_phong")


def seam_pairs(face_map):
    """4-neighbour pairs of valid texels covered by different faces.

    Returns an (M, 2) array of flat texel indices, horizontal pairs first,
    each in row-major order.
    """
    face = face_map.face
    h, w = face.shape
    idx = np.arange(h * w).reshape(h, w)
    out = []
    for first, second in (((slice(None), slice(0, -1)), (slice(None), slice(1, None))),
                          ((slice(0, -1), slice(None)), (slice(1, None), slice(None)))):
        a, b = face[first], face[second]
        hit = (a >= 0) & (b >= 0) & (a != b)
        out.append(np.stack([idx[first][hit], idx[second][hit]], -1))
    return np.concatenate(out).astype(np.int64)


def probe_maps(mask, edge_length):
    """Constant local maps used to expose seams: an off-surface offset and an anisotropic scale."""
    return LocalAttributeMaps.constant(
        mask, position=tuple(edge_length * np.array([0.1, 0.2, 0.3])),
        rotation=(0.9, 0.1, 0.2, 0.3), scale=tuple(edge_length * np.array([0.3, 0.2, 0.1])))


@dataclass(eq=False)
class SeamReport:
    pairs: np.ndarray  # (M, 2) flat texel indices
    width: int
    position_gap: dict  # variant -> (M,)
    covariance_gap: dict  # variant -> (M,)

    def summary(self):
        rows = {}
        for v in self.position_gap:
            p, c = self.position_gap[v], self.covariance_gap[v]
            rows[v] = {"position_max": float(p.max()), "position_mean": float(p.mean()),
                       "covariance_max": float(c.max()), "covariance_mean": float(c.mean())}
        return rows

    def write_csv(self, path):
        variants = list(self.position_gap)
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["a_i", "a_j", "b_i", "b_j"]
                         + [f"{v}_{k}" for v in variants for k in ("position_gap", "covariance_gap")])
            for k, (a, b) in enumerate(self.pairs):
                row = [a % self.width, a // self.width, b % self.width, b // self.width]
                for v in variants:
                    row += [repr(float(self.position_gap[v][k])), repr(float(self.covariance_gap[v][k]))]
                out.writerow(row)


def _grid(gaussians, shape, values):
    h, w = shape
    out = np.zeros((h * w,) + values.shape[1:])
    i, j = gaussians.source_texel[:, 0], gaussians.source_texel[:, 1]
    out[j * w + i] = values
    return out


def _gaps(lift, local, zero_local, pairs, shape):
    gs, g0 = lift(local), lift(zero_local)
    offset = _grid(gs, shape, gs.positions) - _grid(g0, shape, g0.positions)
    cov = _grid(gs, shape, gs.covariances.reshape(-1, 9))
    a, b = pairs[:, 0], pairs[:, 1]
    return (np.linalg.norm(offset[a] - offset[b], axis=1),
            np.linalg.norm(cov[a] - cov[b], axis=1))


def compare_seams(rest, deformed, width, height, dilation_rings=2,
                  frame_variant=Variant.FULL_JACOBIAN, local=None):
    """Seam gaps of the naive and blended lifts on the same inputs.

    The position gap subtracts each texel's zero-offset lift so only the
    jump in how the local offset is transformed is measured.
    """
    face_map = rasterize_faces(rest, width, height)
    pairs = seam_pairs(face_map)
    if not len(pairs):
        raise NoSeams("no valid texel pairs straddle a face boundary")
    jac, trans = frame_arrays(load_pair(rest, deformed), frame_variant)
    fld = dilate_field(build_jacobian_field((jac, trans), face_map), dilation_rings)
    if local is None:
        local = probe_maps(face_map.mask, rest.mean_edge_length())
    zero = local.replace(position=np.zeros_like(local.position))
    lifts = {"naive": lambda m: lift_naive(m, face_map, (jac, trans)),
             "quasi_phong": lambda m: lift_quasi_phong(m, fld)}
    pos, cov = {}, {}
    for v in VARIANTS:
        pos[v], cov[v] = _gaps(lifts[v], local, zero, pairs, (height, width))
    return SeamReport(pairs, width, pos, cov)
