"""Brute-force reference computations used as test oracles.

Nothing here imports texrig; each routine is a direct scalar transcription
of the definition it checks.
"""

import math

import numpy as np


def point_in_triangle(p, a, b, c, tol=1e-10):
    """Inclusive point-in-triangle test via edge cross products (either winding)."""
    def cross(o, x, y):
        return (x[0] - o[0]) * (y[1] - o[1]) - (x[1] - o[1]) * (y[0] - o[0])

    area = cross(a, b, c)
    if area == 0:
        return False
    s = 1.0 if area > 0 else -1.0
    scale = abs(area)
    return (s * cross(a, b, p) >= -tol * scale and s * cross(b, c, p) >= -tol * scale
            and s * cross(c, a, p) >= -tol * scale)


def brute_force_face_ids(uv_tris, width, height):
    """Lowest-index covering triangle at each texel center, -1 if none."""
    out = np.full((height, width), -1)
    for j in range(height):
        for i in range(width):
            p = ((i + 0.5) / width, (j + 0.5) / height)
            for f, (a, b, c) in enumerate(uv_tris):
                if point_in_triangle(p, a, b, c):
                    out[j, i] = f
                    break
    return out


def bilinear_reference(grid, usable, u, v):
    """Center-convention bilinear sample, clamp-to-edge, renormalised over usable taps.

    Returns ``None`` when no tap is usable.
    """
    h, w = len(grid), len(grid[0])
    x = u * w - 0.5
    y = v * h - 0.5
    x = 0.0 if x < 0 else (w - 1.0 if x > w - 1 else x)
    y = 0.0 if y < 0 else (h - 1.0 if y > h - 1 else y)
    i0 = int(math.floor(x))
    j0 = int(math.floor(y))
    i1 = i0 + 1 if i0 + 1 < w else w - 1
    j1 = j0 + 1 if j0 + 1 < h else h - 1
    tx, ty = x - i0, y - j0
    taps = [(i0, j0, (1 - tx) * (1 - ty)), (i1, j0, tx * (1 - ty)),
            (i0, j1, (1 - tx) * ty), (i1, j1, tx * ty)]
    acc, total, lost = 0.0, 0.0, False
    for i, j, wt in taps:
        if usable[j][i]:
            acc = acc + wt * np.asarray(grid[j][i], dtype=float)
            total += wt
        elif wt > 0:
            lost = True
    if total == 0:
        return None
    return acc / total if lost else acc


def l1_reference(a, b):
    total = 0.0
    n = 0
    for x, y in zip(np.ravel(a), np.ravel(b)):
        total += abs(float(x) - float(y))
        n += 1
    return total / n


def psnr_reference(image, target):
    """Peak signal-to-noise ratio for images in [0, 1]."""
    mse = np.mean((np.asarray(image, dtype=float) - np.asarray(target, dtype=float)) ** 2)
    return 10 * math.log10(1.0 / mse)


def central_difference(f, x, h, extrapolate=False):
    """Gradient of scalar ``f`` at array ``x`` by central differences.

    With ``extrapolate`` the steps h and 2h are combined as (4 D(h) - D(2h)) / 3,
    which cancels the h^2 truncation term.
    """
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)

    def diff(idx, step):
        xp, xm = x.copy(), x.copy()
        xp[idx] += step
        xm[idx] -= step
        return (f(xp) - f(xm)) / (2 * step)

    for idx in np.ndindex(x.shape):
        g[idx] = diff(idx, h)
        if extrapolate:
            g[idx] = (4 * g[idx] - diff(idx, 2 * h)) / 3
    return g


def relative_errors(analytic, numeric, floor):
    a = np.asarray(analytic, dtype=float)
    f = np.asarray(numeric, dtype=float)
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)


def quat_matrix(q):
    """Rotation matrix of a quaternion (w, x, y, z), normalised first."""
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
    ])


def ewa_on_axis_image(fx, cx, cy, width, height, depth, sigma, color, opacity, background,
                      low_pass=0.3, alpha_max=0.999, extent=3.0):
    """Closed-form image of one isotropic Gaussian on the optical axis.

    Pixel variance is ``(fx sigma / depth)^2 + low_pass``; the footprint is
    cut at the ``extent``-sigma axis-aligned box.
    """
    var = (fx * sigma / depth) ** 2 + low_pass
    reach = extent * math.sqrt(var)
    img = np.zeros((height, width, 3))
    for y in range(height):
        for x in range(width):
            dx, dy = x - cx, y - cy
            a = 0.0
            if abs(dx) <= reach and abs(dy) <= reach:
                a = min(opacity * math.exp(-0.5 * (dx * dx + dy * dy) / var), alpha_max)
            img[y, x] = a * np.asarray(color) + (1 - a) * np.asarray(background)
    return img
