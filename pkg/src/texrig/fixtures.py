"""Small synthetic meshes and scenes for tests, validation and the examples."""

from __future__ import annotations

import numpy as np

from .fit import Frame, prepare_scene, render_frames
from .mesh import TriMesh
from .render import Camera
from .rig import LocalAttributeMaps


def uv_sphere(n_lon=10, n_lat=11, radius=1.0):
    """Latitude/longitude sphere; the defaults give 200 faces.

    3D vertices are shared around the longitude seam while UVs are not, so
    the UV topology differs from the 3D one.
    """
    rings = np.arange(1, n_lat)
    theta = np.pi * rings / n_lat
    phi = 2 * np.pi * np.arange(n_lon) / n_lon
    ring_xyz = np.stack([
        np.outer(np.sin(theta), np.cos(phi)),
        np.outer(np.cos(theta), np.ones(n_lon)),
        np.outer(np.sin(theta), np.sin(phi)),
    ], axis=-1).reshape(-1, 3)
    verts = np.concatenate([[[0, 1, 0]], ring_xyz, [[0, -1, 0]]]) * radius
    top, bottom = 0, len(verts) - 1

    def vid(r, j):  # r: ring index 0..n_lat-2
        return 1 + r * n_lon + (j % n_lon)

    ring_uv = np.stack(np.meshgrid(np.arange(n_lon + 1) / n_lon, rings / n_lat), -1).reshape(-1, 2)
    top_uv = np.stack([(np.arange(n_lon) + 0.5) / n_lon, np.zeros(n_lon)], -1)
    bot_uv = np.stack([(np.arange(n_lon) + 0.5) / n_lon, np.ones(n_lon)], -1)
    uvs = np.concatenate([ring_uv, top_uv, bot_uv])

    def uid(r, j):
        return r * (n_lon + 1) + j

    n_ring_uv = len(ring_uv)
    faces, uv_faces = [], []
    for j in range(n_lon):
        faces.append([top, vid(0, j + 1), vid(0, j)])
        uv_faces.append([n_ring_uv + j, uid(0, j + 1), uid(0, j)])
    for r in range(n_lat - 2):
        for j in range(n_lon):
            a, b = vid(r, j), vid(r, j + 1)
            c, d = vid(r + 1, j), vid(r + 1, j + 1)
            ua, ub, uc, ud = uid(r, j), uid(r, j + 1), uid(r + 1, j), uid(r + 1, j + 1)
            faces += [[a, b, d], [a, d, c]]
            uv_faces += [[ua, ub, ud], [ua, ud, uc]]
    last = n_lat - 2
    for j in range(n_lon):
        faces.append([bottom, vid(last, j), vid(last, j + 1)])
        uv_faces.append([n_ring_uv + n_lon + j, uid(last, j), uid(last, j + 1)])
    return TriMesh(verts, faces, uvs, uv_faces)


def random_affine(rng, max_dev=0.3, max_shift=0.5):
    """Well-conditioned ``(A, b)``: ``A = I + E`` with ``|E_ij| <= max_dev / 3``."""
    a = np.eye(3) + rng.uniform(-max_dev, max_dev, (3, 3)) / 3
    return a, rng.uniform(-max_shift, max_shift, 3)


def affine_mesh(mesh, a, b):
    return mesh.with_vertices(mesh.vertices @ np.asarray(a).T + b)


def bent_strip(angle_deg=30.0):
    """Two triangles sharing the diagonal of the unit square; ``(rest, bent)``.

    The second triangle is rotated about the shared edge by ``angle_deg``.
    UVs equal the rest xy coordinates.
    """
    verts = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=np.float64)
    faces = [[0, 1, 2], [0, 2, 3]]
    rest = TriMesh(verts, faces, verts[:, :2], faces)
    axis = np.array([1.0, 1.0, 0.0]) / np.sqrt(2.0)
    bent = verts.copy()
    bent[3] = rotate_about_axis(verts[3], axis, np.radians(angle_deg))
    return rest, rest.with_vertices(bent)


def rotate_about_axis(p, axis, angle):
    """Rodrigues rotation of point(s) ``p`` about a unit axis through the origin."""
    p = np.asarray(p, dtype=np.float64)
    k = np.asarray(axis, dtype=np.float64)
    c, s = np.cos(angle), np.sin(angle)
    return p * c + np.cross(k, p) * s + np.outer(p @ k, k).reshape(p.shape) * (1 - c)


def grid_patch(n=4, size=1.0, bump=0.15):
    """``n x n`` vertex height-field patch centred at the origin, UV = grid."""
    t = np.linspace(0.0, 1.0, n)
    uu, vv = np.meshgrid(t, t)
    x = (uu - 0.5) * size
    y = (vv - 0.5) * size
    z = bump * size * np.exp(-((uu - 0.5) ** 2 + (vv - 0.5) ** 2) / 0.08)
    verts = np.stack([x, y, z], -1).reshape(-1, 3)
    uvs = np.stack([uu, vv], -1).reshape(-1, 2)
    faces = []
    for j in range(n - 1):
        for i in range(n - 1):
            a, b = j * n + i, j * n + i + 1
            c, d = (j + 1) * n + i, (j + 1) * n + i + 1
            faces += [[a, b, d], [a, d, c]]
    return TriMesh(verts, faces, uvs, faces)


def deform_patch(mesh, amount=1.0):
    """Smooth non-rigid deformation: bend about y, stretch along x, twist."""
    v = mesh.vertices.copy()
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    bend = 0.6 * amount
    out = np.stack([
        x * (1.0 + 0.25 * amount) + 0.1 * amount * y * y,
        y + 0.15 * amount * x * y,
        z + bend * x * x - 0.1 * amount * y,
    ], -1)
    return mesh.with_vertices(out)


def front_camera(width=64, height=64, distance=2.2, yaw_deg=0.0, pitch_deg=0.0,
                 fov_deg=40.0, background=(0.0, 0.0, 0.0)):
    """Camera orbiting the origin, looking along -z toward the patch."""
    yaw, pitch = np.radians(yaw_deg), np.radians(pitch_deg)
    eye = distance * np.array([np.sin(yaw) * np.cos(pitch), np.sin(pitch),
                               np.cos(yaw) * np.cos(pitch)])
    return Camera.look_at(eye, [0.0, 0.0, 0.0], up=(0.0, 1.0, 0.0), fov_deg=fov_deg,
                          width=width, height=height, background=background)


def recovery_scene(texels=16, image_size=64, seed=0):
    """Self-consistent fitting problem: targets rendered from known maps.

    A bumped 5x5 patch under a smooth deformation seen by two cameras.
    Returns ``(rest, frames, scene, truth)`` with targets already attached.
    """
    rng = np.random.default_rng(seed)
    rest = grid_patch(n=5)
    background = (0.05, 0.05, 0.1)
    cams = [front_camera(image_size, image_size, yaw_deg=-15, background=background),
            front_camera(image_size, image_size, yaw_deg=20, pitch_deg=10, background=background)]
    deformed = deform_patch(rest, 0.3)
    frames = [Frame(deformed, cam) for cam in cams]
    scene = prepare_scene(rest, frames, texels, texels)
    truth = LocalAttributeMaps.surface_init(rest, scene.face_map)
    truth = truth.replace(color=rng.uniform(-2.0, 2.0, truth.color.shape))
    for fr, frame, image in zip(scene.frames, frames, render_frames(truth, scene)):
        fr.target = image
        frame.target = image
    return rest, frames, scene, truth
