"""Camera models and projection of 3D Gaussians to screen-space 2D Gaussians.

Conventions: world_to_camera is a rigid 4x4 transform, camera looks down +z,
pixel (x, y) samples at integer coordinates with u = fx*tx/tz + cx (pinhole)
or u = fx*tx + cx (orthographic). Depth is camera-space z.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rotation import quat_to_rot
from .scene import Gaussian, GaussianCloud

NEAR_PLANE = 0.01
COV_DILATION = 0.3   # px^2 added to the cov2d diagonal (anti-aliasing floor)
CULL_SIGMA = 3.0     # screen-extent culling and support truncation radius


@dataclass
class CameraView:
    """Pinhole or orthographic camera with pose, optionally paired with a
    target image (H, W, 3) and an instance mask (H, W)."""

    world_to_camera: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    mode: str = "pinhole"
    image: np.ndarray | None = None
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")
        if self.mode not in ("pinhole", "orthographic"):
            raise ValueError(f"unknown camera mode {self.mode!r}")
        R = self.world_to_camera[:3, :3]
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-5:
            raise ValueError("rotation block of world_to_camera is not orthonormal")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    def camera_center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """world_to_camera for a camera at `position` looking toward `target`.

    Camera axes: x right, y down, z forward (right-handed).
    """
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("camera position coincides with target")
    z = forward / norm
    up = np.asarray(up, dtype=np.float64)
    x = np.cross(z, up)
    # guard against forward parallel to up
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, np.array([0.0, 1.0, 0.0]))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)  # image y points away from `up`
    w2c = np.eye(4)
    w2c[0, :3], w2c[1, :3], w2c[2, :3] = x, y, z
    w2c[:3, 3] = -w2c[:3, :3] @ position
    return w2c


class ProjectedSplats:
    """Screen-space Gaussians for one camera, depth-ordered, with the cached
    intermediates the backward pass reuses."""

    __slots__ = ("index", "mean2d", "cov2d", "inv_cov", "depth", "t_cam",
                 "bbox", "J", "A", "R", "cov3d", "scales", "cam", "n_source")

    def __init__(self, **kw):
        for k in self.__slots__:
            setattr(self, k, kw[k])

    @property
    def count(self) -> int:
        return self.index.shape[0]


@dataclass
class Splat2D:
    """A single projected Gaussian (public per-splat view of ProjectedSplats)."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    source_index: int


def project_cloud(cloud: GaussianCloud, cam: CameraView,
                  near: float = NEAR_PLANE, cull_sigma: float | None = CULL_SIGMA,
                  dilation: float = COV_DILATION,
                  alpha_cutoff: float = 0.0) -> ProjectedSplats:
    """Project every Gaussian, cull, and depth-sort (ties by source index).

    Culling removes Gaussians with depth <= near and, when cull_sigma is not
    None, those whose cull_sigma-sigma screen ellipse misses the image. With
    alpha_cutoff > 0 the tile-binning bboxes shrink to the radius where alpha
    can still reach the cutoff (opacity-dependent); visibility itself stays
    determined by the cull_sigma ellipse.
    """
    dt = cloud.dtype
    n = cloud.n
    Rcw = cam.rotation.astype(dt)
    tcw = cam.translation.astype(dt)
    fx, fy, cx, cy = (dt.type(v) for v in (cam.fx, cam.fy, cam.cx, cam.cy))

    t = cloud.positions @ Rcw.T + tcw  # camera-space centers
    depth = t[:, 2]
    alive = depth > near

    # screen means and projection Jacobians
    mean2d = np.empty((n, 2), dtype=dt)
    J = np.zeros((n, 2, 3), dtype=dt)
    if cam.mode == "pinhole":
        with np.errstate(divide="ignore", invalid="ignore"):
            inv_z = np.where(alive, 1.0 / depth, 0.0)
        mean2d[:, 0] = fx * t[:, 0] * inv_z + cx
        mean2d[:, 1] = fy * t[:, 1] * inv_z + cy
        J[:, 0, 0] = fx * inv_z
        J[:, 1, 1] = fy * inv_z
        J[:, 0, 2] = -fx * t[:, 0] * inv_z ** 2
        J[:, 1, 2] = -fy * t[:, 1] * inv_z ** 2
    else:
        mean2d[:, 0] = fx * t[:, 0] + cx
        mean2d[:, 1] = fy * t[:, 1] + cy
        J[:, 0, 0] = fx
        J[:, 1, 1] = fy

    R = quat_to_rot(cloud.rotations)
    M = R * cloud.scales[:, None, :]         # R @ diag(s)
    cov3d = M @ np.swapaxes(M, 1, 2)
    A = J @ Rcw
    cov2d = A @ cov3d @ np.swapaxes(A, 1, 2)
    cov2d[:, 0, 0] += dilation
    cov2d[:, 1, 1] += dilation

    # 3-sigma screen radius from the largest eigenvalue of cov2d
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0.0))
    lam_max = mid + disc
    sigma = CULL_SIGMA if cull_sigma is None else cull_sigma
    sqrt_lam = np.sqrt(np.maximum(lam_max, 0.0))
    radius = sigma * sqrt_lam

    if cull_sigma is None:
        # keep everything in front of the camera, covering the whole image
        x0 = np.zeros(n); x1 = np.full(n, cam.width - 1)
        y0 = np.zeros(n); y1 = np.full(n, cam.height - 1)
    else:
        # visibility from the sigma-ellipse; binning bbox may shrink to the
        # radius where alpha >= alpha_cutoff is still attainable
        vx0 = np.ceil(mean2d[:, 0] - radius)
        vx1 = np.floor(mean2d[:, 0] + radius)
        vy0 = np.ceil(mean2d[:, 1] - radius)
        vy1 = np.floor(mean2d[:, 1] + radius)
        alive &= ((np.maximum(vx0, 0) <= np.minimum(vx1, cam.width - 1))
                  & (np.maximum(vy0, 0) <= np.minimum(vy1, cam.height - 1)))
        if alpha_cutoff > 0:
            with np.errstate(divide="ignore", invalid="ignore"):
                q_max = 2.0 * np.log(np.maximum(cloud.opacities / alpha_cutoff,
                                                1e-30)) + 1e-4
            bin_radius = np.sqrt(np.clip(q_max, 0.0, sigma * sigma)) * sqrt_lam
        else:
            bin_radius = radius
        x0 = np.maximum(np.ceil(mean2d[:, 0] - bin_radius), 0)
        x1 = np.minimum(np.floor(mean2d[:, 0] + bin_radius), cam.width - 1)
        y0 = np.maximum(np.ceil(mean2d[:, 1] - bin_radius), 0)
        y1 = np.minimum(np.floor(mean2d[:, 1] + bin_radius), cam.height - 1)

    idx = np.nonzero(alive)[0]
    order = np.lexsort((idx, depth[idx]))  # ascending depth, ties by index
    idx = idx[order]

    cov_sel = cov2d[idx]
    det = cov_sel[:, 0, 0] * cov_sel[:, 1, 1] - cov_sel[:, 0, 1] ** 2
    if np.any(det <= 0):
        raise FloatingPointError("singular projected covariance")
    inv = np.empty_like(cov_sel)
    inv[:, 0, 0] = cov_sel[:, 1, 1] / det
    inv[:, 1, 1] = cov_sel[:, 0, 0] / det
    inv[:, 0, 1] = inv[:, 1, 0] = -cov_sel[:, 0, 1] / det

    bbox = np.stack([x0[idx], x1[idx], y0[idx], y1[idx]], axis=1).astype(np.int64)
    return ProjectedSplats(
        index=idx, mean2d=mean2d[idx], cov2d=cov_sel, inv_cov=inv,
        depth=depth[idx], t_cam=t[idx], bbox=bbox, J=J[idx], A=A[idx],
        R=R[idx], cov3d=cov3d[idx], scales=cloud.scales[idx], cam=cam,
        n_source=n,
    )


def project_gaussian(g: Gaussian, cam: CameraView, near: float = NEAR_PLANE):
    """Project a single Gaussian. Returns a Splat2D, or None when culled."""
    cloud = GaussianCloud(
        g.position[None].astype(np.float64), g.scale[None], g.rotation[None],
        np.array([g.opacity]), g.color[None], g.encoding[None])
    splats = project_cloud(cloud, cam, near=near)
    if splats.count == 0:
        return None
    return Splat2D(mean2d=splats.mean2d[0].copy(), cov2d=splats.cov2d[0].copy(),
                   depth=float(splats.depth[0]), source_index=0)


def depth_sort(depths, source_indices=None) -> np.ndarray:
    """Indices sorting splats by ascending depth, ties by ascending source index."""
    depths = np.asarray(depths)
    if depths.size and not np.all(np.isfinite(depths)):
        raise ValueError("NaN or infinite depth")
    if source_indices is None:
        source_indices = np.arange(depths.shape[0])
    source_indices = np.asarray(source_indices)
    order = np.lexsort((source_indices, depths))
    return order
