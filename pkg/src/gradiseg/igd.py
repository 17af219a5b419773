"""Identity-gradient-guided densification.

Each pass over the cloud: prune near-transparent and oversized Gaussians,
find those whose mean accumulated identity-encoding gradient is anomalous
(above a percentile threshold), replace each with two children straddling the
inferred boundary, and reset the gradient monitors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rotation import quat_to_rot
from .scene import Gaussian, GaussianCloud


@dataclass
class IgdConfig:
    tau_percentile: float = 99.0     # anomaly threshold over mean monitor values
    opacity_eps: float = 0.005
    too_large_frac: float = 0.1      # of scene extent
    split_scale_div: float = 1.6
    split_offset_frac: float = 0.5   # of the largest scale component
    interval: int = 100
    split_direction: str = "principal-axis"  # or "position-gradient"
    monitor_mode: str = "norm"       # "norm": sum of |de|; "vector": |sum de|

    def __post_init__(self):
        if not (0 < self.tau_percentile < 100):
            raise ValueError("tau_percentile must be in (0, 100)")
        for name in ("opacity_eps", "too_large_frac", "split_scale_div",
                     "split_offset_frac", "interval"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.split_direction not in ("principal-axis", "position-gradient"):
            raise ValueError(f"unknown split_direction {self.split_direction!r}")
        if self.monitor_mode not in ("norm", "vector"):
            raise ValueError(f"unknown monitor_mode {self.monitor_mode!r}")


@dataclass
class IgdResult:
    cloud: GaussianCloud
    n_pruned: int
    n_split: int
    threshold: float


def _split_axis(scale: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """World-space unit vector of the largest-scale principal axis.

    Equal scales tie-break to the lowest axis index.
    """
    axis = int(np.argmax(scale))
    return quat_to_rot(rotation.astype(np.float64))[:, axis]


def split_gaussian(g: Gaussian, cfg: IgdConfig,
                   pos_grad_ema: np.ndarray | None = None) -> tuple[Gaussian, Gaussian]:
    """Split one Gaussian into two children on either side of the boundary.

    Children sit at p +- split_offset_frac * s_max * v with all scale
    components divided by split_scale_div; rotation, opacity, color and
    identity encoding are copied. v is the major principal axis, or the
    negated position-gradient EMA in position-gradient mode (falling back to
    the principal axis when the EMA is numerically zero). Degenerate scales
    (s_max < 1e-9) clone in place without offset or shrink.
    """
    s_max = float(np.max(g.scale))
    if s_max < 1e-9:
        return (Gaussian(g.position.copy(), g.scale.copy(), g.rotation.copy(),
                         g.opacity, g.color.copy(), g.encoding.copy()),
                Gaussian(g.position.copy(), g.scale.copy(), g.rotation.copy(),
                         g.opacity, g.color.copy(), g.encoding.copy()))
    v = None
    if cfg.split_direction == "position-gradient" and pos_grad_ema is not None:
        norm = np.linalg.norm(pos_grad_ema)
        if norm >= 1e-12:
            v = -np.asarray(pos_grad_ema, dtype=np.float64) / norm
    if v is None:
        v = _split_axis(g.scale, g.rotation)
    offset = (cfg.split_offset_frac * s_max * v).astype(g.position.dtype)
    new_scale = (g.scale / cfg.split_scale_div).astype(g.scale.dtype)
    mk = lambda p: Gaussian(p, new_scale.copy(), g.rotation.copy(), g.opacity,
                            g.color.copy(), g.encoding.copy())
    return mk(g.position + offset), mk(g.position - offset)


def _split_rows(cloud: GaussianCloud, rows: np.ndarray, cfg: IgdConfig) -> GaussianCloud:
    """Vectorized split of the given rows; children interleave (+, -) per parent."""
    dt = cloud.dtype
    s = cloud.scales[rows]
    s_max = s.max(axis=1)
    degenerate = s_max < 1e-9

    if cfg.split_direction == "position-gradient":
        ema = cloud.pos_grad_ema[rows]
        norms = np.linalg.norm(ema, axis=1)
        use_ema = norms >= 1e-12
        v = np.zeros((rows.size, 3), dtype=dt)
        v[use_ema] = -ema[use_ema] / norms[use_ema, None]
    else:
        use_ema = np.zeros(rows.size, dtype=bool)
        v = np.zeros((rows.size, 3), dtype=dt)
    if not use_ema.all():
        R = quat_to_rot(cloud.rotations[rows[~use_ema]])
        axes = np.argmax(s[~use_ema], axis=1)
        v[~use_ema] = R[np.arange(axes.size), :, axes]

    offset = cfg.split_offset_frac * s_max[:, None] * v
    offset[degenerate] = 0.0
    new_scale = s / dt.type(cfg.split_scale_div)
    new_scale[degenerate] = s[degenerate]

    m = rows.size
    pos = np.empty((2 * m, 3), dtype=dt)
    pos[0::2] = cloud.positions[rows] + offset
    pos[1::2] = cloud.positions[rows] - offset
    rep = np.repeat(rows, 2)
    children = GaussianCloud(
        pos, np.repeat(new_scale, 2, axis=0), cloud.rotations[rep],
        cloud.opacities[rep], cloud.colors[rep], cloud.encodings[rep],
        cloud.group_ids[rep],
    )
    return children


def monitor_values(cloud: GaussianCloud, mode: str = "norm") -> np.ndarray:
    """Per-Gaussian mean monitor: accumulated identity gradient / visible count."""
    denom = np.maximum(cloud.visible_count, 1)
    if mode == "vector":
        return np.linalg.norm(cloud.id_grad_vec, axis=1) / denom
    return cloud.id_grad_accum / denom


def igd_step(cloud: GaussianCloud, cfg: IgdConfig, scene_extent: float | None = None,
             followers: tuple = ()) -> IgdResult:
    """One densification pass: prune, split anomalous rows, reset monitors.

    `followers` are row-synchronized companions (optimizer state, densify
    stats) exposing select_rows(index) and append_rows(count); they receive
    the same row edits, with new rows zero-initialized.
    """
    if scene_extent is None:
        scene_extent = cloud.scene_extent()

    keep = ~((cloud.opacities < cfg.opacity_eps)
             | (cloud.scales.max(axis=1) > cfg.too_large_frac * scene_extent))
    n_pruned = int((~keep).sum())
    keep_idx = np.nonzero(keep)[0]
    cloud = cloud.select(keep_idx)
    for f in followers:
        f.select_rows(keep_idx)

    m = monitor_values(cloud, cfg.monitor_mode)
    seen = cloud.visible_count > 0
    if seen.any():
        tau = float(np.percentile(m[seen], cfg.tau_percentile))
        split_mask = m > tau
    else:
        tau = 0.0
        split_mask = np.zeros(cloud.n, dtype=bool)
    split_rows = np.nonzero(split_mask)[0]
    n_split = split_rows.size

    if n_split:
        children = _split_rows(cloud, split_rows, cfg)
        survivors = np.nonzero(~split_mask)[0]
        cloud = cloud.select(survivors).append(children)
        for f in followers:
            f.select_rows(survivors)
            f.append_rows(2 * n_split)

    cloud.reset_monitors()
    return IgdResult(cloud=cloud, n_pruned=n_pruned, n_split=n_split, threshold=tau)
