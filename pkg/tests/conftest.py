"""Shared test fixtures and independent reference implementations.

The reference renderer here is deliberately scalar and separate from the
engine: its own projection arithmetic, its own sort, its own per-pixel
compositing loop. Engine outputs are validated against it.
"""

import numpy as np
import pytest

from gradiseg.camera import CameraView, look_at
from gradiseg.scene import GaussianCloud


def random_cloud(rng, n, dim=8, dtype=np.float64, z_range=(-0.4, 0.4),
                 opacity_range=(0.1, 0.85), scale_range=(0.05, 0.35)):
    pos = rng.uniform(-0.6, 0.6, (n, 3))
    pos[:, 2] = rng.uniform(*z_range, n)
    scales = rng.uniform(*scale_range, (n, 3))
    quats = rng.standard_normal((n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    op = rng.uniform(*opacity_range, n)
    col = rng.uniform(0.05, 0.95, (n, 3))
    enc = rng.standard_normal((n, dim)) * 0.5
    return GaussianCloud(pos.astype(dtype), scales.astype(dtype),
                         quats.astype(dtype), op.astype(dtype),
                         col.astype(dtype), enc.astype(dtype))


def test_camera(width=32, height=32, distance=3.0, fov_scale=1.0):
    focal = fov_scale * width * 1.2
    return CameraView(look_at((0.0, 0.0, -distance), (0.0, 0.0, 0.0)),
                      fx=focal, fy=focal, cx=width / 2.0, cy=height / 2.0,
                      width=width, height=height)


def quat_rotation_ref(q):
    """Independent quaternion -> rotation matrix (scalar formula)."""
    w, x, y, z = (float(v) for v in q / np.linalg.norm(q))
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def reference_render(cloud, cam, background=(0.0, 0.0, 0.0),
                     alpha_clamp=0.99, alpha_cutoff=1.0 / 255.0,
                     cull_sigma=3.0, near=0.01, dilation=0.3):
    """Naive sequential per-pixel compositing, scalar math throughout.

    Returns (color, identity, final_transmittance, per_pixel_fragments) where
    per_pixel_fragments[y][x] is a list of (source, alpha, t_before).
    """
    h, w = cam.height, cam.width
    bg = np.asarray(background, dtype=np.float64)
    R_cw = cam.world_to_camera[:3, :3]
    t_cw = cam.world_to_camera[:3, 3]

    splats = []
    for i in range(cloud.n):
        t = R_cw @ cloud.positions[i].astype(np.float64) + t_cw
        if t[2] <= near:
            continue
        if cam.mode == "pinhole":
            mean = np.array([cam.fx * t[0] / t[2] + cam.cx,
                             cam.fy * t[1] / t[2] + cam.cy])
            J = np.array([[cam.fx / t[2], 0.0, -cam.fx * t[0] / t[2] ** 2],
                          [0.0, cam.fy / t[2], -cam.fy * t[1] / t[2] ** 2]])
        else:
            mean = np.array([cam.fx * t[0] + cam.cx, cam.fy * t[1] + cam.cy])
            J = np.array([[cam.fx, 0.0, 0.0], [0.0, cam.fy, 0.0]])
        Rg = quat_rotation_ref(cloud.rotations[i].astype(np.float64))
        S = np.diag(cloud.scales[i].astype(np.float64))
        cov3 = Rg @ S @ S @ Rg.T
        A = J @ R_cw
        cov2 = A @ cov3 @ A.T + dilation * np.eye(2)
        if cull_sigma is not None:
            lam = np.linalg.eigvalsh(cov2).max()
            r = cull_sigma * np.sqrt(lam)
            if (mean[0] + r < 0 or mean[0] - r > w - 1
                    or mean[1] + r < 0 or mean[1] - r > h - 1):
                continue
        splats.append((float(t[2]), i, mean, np.linalg.inv(cov2)))

    splats.sort(key=lambda s: (s[0], s[1]))

    color = np.zeros((h, w, 3))
    ident = np.zeros((h, w, cloud.dim))
    t_final = np.ones((h, w))
    frags = [[[] for _ in range(w)] for _ in range(h)]
    for y in range(h):
        for x in range(w):
            T = 1.0
            px = np.array([float(x), float(y)])
            for depth, i, mean, icov in splats:
                d = px - mean
                q = float(d @ icov @ d)
                alpha = min(alpha_clamp,
                            float(cloud.opacities[i]) * np.exp(-0.5 * q))
                if alpha_cutoff > 0 and alpha < alpha_cutoff:
                    continue
                if alpha_cutoff <= 0 and alpha <= 0:
                    continue
                if cull_sigma is not None and q > cull_sigma ** 2:
                    continue
                frags[y][x].append((i, alpha, T))
                wgt = alpha * T
                color[y, x] += wgt * cloud.colors[i].astype(np.float64)
                ident[y, x] += wgt * cloud.encodings[i].astype(np.float64)
                T *= 1.0 - alpha
            color[y, x] += T * bg
            t_final[y, x] = T
    return color, ident, t_final, frags


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
