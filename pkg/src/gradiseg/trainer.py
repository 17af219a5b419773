"""End-to-end optimization: joint loss, Adam updates, phase schedule, checkpoints.

Schedule phases (iteration i, total T):
  i < densify_end:            standard clone/split densification at intervals
  densify_end <= i < igd_end: identity-gradient-guided densification at intervals
  i >= knn_switch:            3D consistency loss switches from global to
                              direction-aware neighbor selection

Each iteration renders one training view (round robin), computes
L = L1 + alpha*L2d + beta*L3d, backpropagates, accumulates monitors, steps
Adam, then applies any scheduled row edits. The last manifest view is held
out for PSNR logging and never trained on.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .backward import ParamGrads, accumulate_monitors, backward
from .dataset import Dataset, infer_scene_bounds
from .igd import IgdConfig, igd_step
from .laknn import loss_3d
from .metrics import psnr
from .render import RenderOptions, render
from .scene import GaussianCloud, assign_groups, save_scene
from .semantic import ClassifierHead, loss_2d

PARAM_FAMILIES = ("positions", "log_scales", "rotations", "logit_opacities",
                  "colors", "encodings", "head_weights", "head_biases")
PER_GAUSSIAN = PARAM_FAMILIES[:6]

OPACITY_LOGIT_CLIP = 1e-6  # opacity clamped into (0,1) before logit


@dataclass
class TrainSchedule:
    """Run configuration. Interval fields are iteration counts; *_end and
    knn_switch default to fixed fractions of total_iters when left None."""

    total_iters: int = 3000
    densify_end: int | None = None      # default 0.4 * T
    igd_end: int | None = None          # default 0.5 * T
    knn_switch: int | None = None       # default 0.4 * T
    densify_interval: int = 100
    igd_interval: int = 100
    alpha_2d: float = 1.0
    beta_3d: float = 2.0
    knn_k: int = 5
    knn_samples: int = 1000
    seed: int = 42

    # learning rates; lr_position is scaled by scene extent when None
    lr_position: float | None = None
    lr_position_frac: float = 1.6e-4
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    lr_encoding: float = 2.5e-3
    lr_head: float = 5e-4

    init_count: int = 2000
    init_opacity: float = 0.1
    encoding_dim: int = 16
    num_classes: int = 256
    background: tuple = (0.0, 0.0, 0.0)

    densify_grad_frac: float = 2e-4     # of scene extent, per visible iteration
    densify_percent_dense: float = 0.01  # clone below, split above this size
    opacity_eps: float = 0.005
    igd_tau_percentile: float = 99.0
    igd_too_large_frac: float = 0.1
    igd_split_scale_div: float = 1.6
    igd_split_offset_frac: float = 0.5
    igd_split_direction: str = "principal-axis"
    monitor_mode: str = "norm"

    use_igd: bool = True
    use_laknn: bool = True              # False: global neighbors throughout
    laknn_head_grads: bool = False

    checkpoint_interval: int = 500
    log_interval: int = 50
    dtype: str = "float32"

    def resolved(self) -> "TrainSchedule":
        s = TrainSchedule(**{f.name: getattr(self, f.name) for f in fields(self)})
        t = s.total_iters
        if s.densify_end is None:
            s.densify_end = int(round(0.4 * t))
        if s.igd_end is None:
            s.igd_end = int(round(0.5 * t))
        if s.knn_switch is None:
            s.knn_switch = int(round(0.4 * t))
        s.validate()
        return s

    def validate(self) -> None:
        if self.total_iters < 0:
            raise ValueError("total_iters must be >= 0")
        if self.total_iters > 0 and not (0 < self.densify_end <= self.igd_end <= self.total_iters):
            raise ValueError("need 0 < densify_end <= igd_end <= total_iters")
        if self.knn_switch is not None and self.knn_switch > self.total_iters:
            raise ValueError("knn_switch must be <= total_iters")
        if self.alpha_2d < 0 or self.beta_3d < 0:
            raise ValueError("loss weights must be >= 0")

    def igd_config(self) -> IgdConfig:
        return IgdConfig(
            tau_percentile=self.igd_tau_percentile, opacity_eps=self.opacity_eps,
            too_large_frac=self.igd_too_large_frac,
            split_scale_div=self.igd_split_scale_div,
            split_offset_frac=self.igd_split_offset_frac,
            interval=self.igd_interval, split_direction=self.igd_split_direction,
            monitor_mode=self.monitor_mode)

    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


class AdamOptimizer:
    """Bias-corrected Adam over named parameter families.

    Per-Gaussian families stay row-synchronized with the cloud through
    select_rows/append_rows; new rows start with zero moments.
    """

    def __init__(self, shapes: dict, lrs: dict, dtype,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lrs = dict(lrs)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros(s, dtype=dtype) for k, s in shapes.items()}
        self.v = {k: np.zeros(s, dtype=dtype) for k, s in shapes.items()}
        self.t = {k: 0 for k in shapes}

    def step(self, params: dict, grads: dict) -> None:
        """Update params in place. Raises on NaN gradients, naming the family."""
        for name, g in grads.items():
            if name not in self.m:
                raise KeyError(f"unknown parameter family {name!r}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in family {name!r}")
            p = params[name]
            if p.shape != g.shape or p.shape != self.m[name].shape:
                raise ValueError(f"shape mismatch in family {name!r}")
            self.t[name] += 1
            t = self.t[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            p -= self.lrs[name] * m_hat / (np.sqrt(v_hat) + self.eps)

    # row synchronization with the cloud
    def select_rows(self, index) -> None:
        for name in PER_GAUSSIAN:
            if name in self.m:
                self.m[name] = self.m[name][index]
                self.v[name] = self.v[name][index]

    def append_rows(self, count: int) -> None:
        for name in PER_GAUSSIAN:
            if name in self.m:
                pad = np.zeros((count,) + self.m[name].shape[1:], dtype=self.m[name].dtype)
                self.m[name] = np.concatenate([self.m[name], pad])
                self.v[name] = np.concatenate([self.v[name], pad])


def adam_step(state: AdamOptimizer, params: dict, grads: dict) -> None:
    """Single Adam update across families (thin wrapper over state.step)."""
    state.step(params, grads)


class DensifyStats:
    """Accumulated positional-gradient norms and visible-iteration counts."""

    def __init__(self, n: int, dtype):
        self.grad_accum = np.zeros(n, dtype=dtype)
        self.denom = np.zeros(n, dtype=np.int64)

    def update(self, grads: ParamGrads) -> None:
        self.grad_accum += np.linalg.norm(grads.positions, axis=1)
        self.denom += grads.visible.astype(np.int64)

    def reset(self, n: int) -> None:
        self.grad_accum = np.zeros(n, dtype=self.grad_accum.dtype)
        self.denom = np.zeros(n, dtype=np.int64)

    def select_rows(self, index) -> None:
        self.grad_accum = self.grad_accum[index]
        self.denom = self.denom[index]

    def append_rows(self, count: int) -> None:
        self.grad_accum = np.concatenate(
            [self.grad_accum, np.zeros(count, dtype=self.grad_accum.dtype)])
        self.denom = np.concatenate([self.denom, np.zeros(count, dtype=np.int64)])


def l1_loss(rendered: np.ndarray, target: np.ndarray):
    """Mean absolute per-channel difference and its gradient w.r.t. rendered."""
    target = np.asarray(target, dtype=rendered.dtype)
    diff = rendered - target
    loss = float(np.abs(diff).mean())
    grad = np.sign(diff) / diff.size
    return loss, grad.astype(rendered.dtype)


def total_loss(cloud: GaussianCloud, cam, out, head: ClassifierHead,
               alpha: float, beta: float, knn_mode: str, knn_k: int,
               knn_samples: int, rng_seed, laknn_head_grads: bool = False):
    """Joint objective L1 + alpha*L2d + beta*L3d with all gradients.

    Returns (parts dict, ParamGrads, (head_w_grad, head_b_grad)).
    """
    l1, d_color = l1_loss(out.color, cam.image)
    l2d, d_ident, (hw2, hb2) = loss_2d(out.identity, cam.mask, head)
    l3d, ge3, hg3 = loss_3d(cloud, head, knn_samples, knn_k, knn_mode, rng_seed,
                            head_grads=laknn_head_grads)
    pixel_grads = np.concatenate(
        [d_color, np.asarray(alpha, dtype=out.identity.dtype) * d_ident], axis=2)
    grads = backward(cloud, cam, out, pixel_grads)
    grads.encodings += beta * ge3
    head_w = alpha * hw2
    head_b = alpha * hb2
    if laknn_head_grads and hg3 is not None:
        head_w = head_w + beta * hg3[0]
        head_b = head_b + beta * hg3[1]
    parts = {"l1": l1, "l2d": l2d, "l3d": l3d,
             "total": l1 + alpha * l2d + beta * l3d}
    return parts, grads, (head_w, head_b)


def init_cloud(bbox: np.ndarray, count: int, dim: int, rng: np.random.Generator,
               opacity: float = 0.1, dtype=np.float32) -> GaussianCloud:
    """Seed cloud: uniform positions in bbox, isotropic scales set to the mean
    nearest-neighbor distance, gray color, small random encodings."""
    lo, hi = np.asarray(bbox[0]), np.asarray(bbox[1])
    pos = rng.uniform(lo, hi, size=(count, 3))
    # mean nearest-neighbor distance (chunked brute force)
    nn = np.full(count, np.inf)
    for s in range(0, count, 512):
        block = pos[s:s + 512]
        d2 = ((block[:, None, :] - pos[None, :, :]) ** 2).sum(-1)
        d2[np.arange(block.shape[0]), s + np.arange(block.shape[0])] = np.inf
        nn[s:s + 512] = np.sqrt(d2.min(axis=1))
    scale = float(np.mean(nn)) if count > 1 else 0.1
    quat = np.zeros((count, 4))
    quat[:, 0] = 1.0
    return GaussianCloud(
        pos.astype(dtype),
        np.full((count, 3), scale, dtype=dtype),
        quat.astype(dtype),
        np.full(count, opacity, dtype=dtype),
        np.full((count, 3), 0.5, dtype=dtype),
        rng.normal(0.0, 0.01, size=(count, dim)).astype(dtype),
    )


def standard_densify(cloud: GaussianCloud, stats: DensifyStats, scene_extent: float,
                     grad_threshold: float, percent_dense: float, opacity_eps: float,
                     rng: np.random.Generator, followers: tuple = ()) -> GaussianCloud:
    """Classic densification: prune transparent rows, then clone small /
    split large Gaussians whose mean positional-gradient norm is large."""
    keep = cloud.opacities >= opacity_eps
    keep_idx = np.nonzero(keep)[0]
    cloud = cloud.select(keep_idx)
    stats.select_rows(keep_idx)
    for f in followers:
        f.select_rows(keep_idx)

    mean_grad = stats.grad_accum / np.maximum(stats.denom, 1)
    hot = mean_grad > grad_threshold
    small = cloud.scales.max(axis=1) <= percent_dense * scene_extent
    clone_rows = np.nonzero(hot & small)[0]
    split_rows = np.nonzero(hot & ~small)[0]

    if clone_rows.size:
        clones = cloud.select(clone_rows)
        cloud = cloud.append(clones)
        stats.append_rows(clone_rows.size)
        for f in followers:
            f.append_rows(clone_rows.size)

    if split_rows.size:
        k = split_rows.size
        R = np.zeros((2 * k, 3), dtype=cloud.dtype)
        samples = rng.normal(size=(2 * k, 3)).astype(cloud.dtype)
        from .rotation import quat_to_rot
        rot = quat_to_rot(cloud.rotations[split_rows])
        local = samples.reshape(k, 2, 3) * cloud.scales[split_rows][:, None, :]
        world = np.einsum("kij,kcj->kci", rot, local)
        rep = np.repeat(split_rows, 2)
        children = GaussianCloud(
            cloud.positions[rep] + world.reshape(2 * k, 3),
            np.repeat(cloud.scales[split_rows] / cloud.dtype.type(1.6), 2, axis=0),
            cloud.rotations[rep], cloud.opacities[rep], cloud.colors[rep],
            cloud.encodings[rep], cloud.group_ids[rep])
        survivors = np.setdiff1d(np.arange(cloud.n), split_rows)
        cloud = cloud.select(survivors).append(children)
        stats.select_rows(survivors)
        stats.append_rows(2 * k)
        for f in followers:
            f.select_rows(survivors)
            f.append_rows(2 * k)

    stats.reset(cloud.n)
    return cloud


@dataclass
class TrainResult:
    cloud: GaussianCloud
    head: ClassifierHead
    metrics_path: Path | None
    metrics_rows: list = field(default_factory=list)


def _cloud_params(cloud: GaussianCloud) -> dict:
    op = np.clip(cloud.opacities, OPACITY_LOGIT_CLIP, 1 - OPACITY_LOGIT_CLIP)
    return {
        "positions": cloud.positions,
        "log_scales": np.log(cloud.scales),
        "rotations": cloud.rotations,
        "logit_opacities": np.log(op / (1 - op)),
        "colors": cloud.colors,
        "encodings": cloud.encodings,
    }


def _write_back(cloud: GaussianCloud, params: dict) -> None:
    cloud.positions = params["positions"]
    cloud.scales = np.exp(params["log_scales"])
    q = params["rotations"]
    cloud.rotations = q / np.linalg.norm(q, axis=1, keepdims=True)
    cloud.opacities = 1.0 / (1.0 + np.exp(-params["logit_opacities"]))
    cloud.colors = np.clip(params["colors"], 0.0, 1.0)
    cloud.encodings = params["encodings"]


def train(dataset: Dataset, schedule: TrainSchedule, out_dir) -> TrainResult:
    """Optimize a fresh cloud + head against the dataset; write checkpoints,
    metrics.csv and final scene into out_dir."""
    sched = schedule.resolved()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if len(dataset.views) < 2:
        raise ValueError("need at least 2 views (one is held out)")
    train_views = dataset.views[:-1]
    holdout = dataset.views[-1]
    dt = sched.np_dtype()

    rng = np.random.default_rng(sched.seed)
    bbox = dataset.scene_bbox
    if bbox is None:
        bbox = infer_scene_bounds(dataset.views)
    cloud = init_cloud(bbox, sched.init_count, sched.encoding_dim, rng,
                       opacity=sched.init_opacity, dtype=dt)
    head = ClassifierHead.zeros(dataset.num_classes, sched.encoding_dim, dtype=dt)
    scene_extent = cloud.scene_extent()
    lr_pos = (sched.lr_position if sched.lr_position is not None
              else sched.lr_position_frac * scene_extent)
    lrs = {"positions": lr_pos, "log_scales": sched.lr_scale,
           "rotations": sched.lr_rotation, "logit_opacities": sched.lr_opacity,
           "colors": sched.lr_color, "encodings": sched.lr_encoding,
           "head_weights": sched.lr_head, "head_biases": sched.lr_head}
    shapes = {"positions": (cloud.n, 3), "log_scales": (cloud.n, 3),
              "rotations": (cloud.n, 4), "logit_opacities": (cloud.n,),
              "colors": (cloud.n, 3), "encodings": (cloud.n, sched.encoding_dim),
              "head_weights": head.weights.shape, "head_biases": head.biases.shape}
    opt = AdamOptimizer(shapes, lrs, dt)
    stats = DensifyStats(cloud.n, dt)
    opts = RenderOptions()
    bg = np.asarray(sched.background, dtype=dt)

    metrics_rows = []

    def log_metrics(it, parts):
        hold = render(cloud, holdout, background=bg, opts=opts)
        p = psnr(np.clip(hold.color, 0.0, 1.0), holdout.image)
        metrics_rows.append((it, parts["l1"], parts["l2d"], parts["l3d"],
                             cloud.n, p))

    def checkpoint(it):
        snap = assign_groups(cloud, head)
        save_scene(snap, head, out_dir / f"ckpt_{it}.gseg")

    parts = {"l1": 0.0, "l2d": 0.0, "l3d": 0.0, "total": 0.0}
    for it in range(sched.total_iters):
        cam = train_views[it % len(train_views)]
        out = render(cloud, cam, background=bg, opts=opts)
        knn_mode = ("local-adaptive" if (sched.use_laknn and it >= sched.knn_switch)
                    else "global")
        parts, grads, (hw, hb) = total_loss(
            cloud, cam, out, head, sched.alpha_2d, sched.beta_3d, knn_mode,
            sched.knn_k, min(sched.knn_samples, cloud.n), (sched.seed, it),
            laknn_head_grads=sched.laknn_head_grads)
        if not np.isfinite(parts["total"]):
            raise FloatingPointError(f"training diverged at iteration {it}")

        accumulate_monitors(cloud, grads)
        stats.update(grads)

        params = _cloud_params(cloud)
        params["head_weights"] = head.weights
        params["head_biases"] = head.biases
        opt.step(params, {
            "positions": grads.positions, "log_scales": grads.log_scales,
            "rotations": grads.rotations, "logit_opacities": grads.logit_opacities,
            "colors": grads.colors, "encodings": grads.encodings,
            "head_weights": hw, "head_biases": hb,
        })
        _write_back(cloud, params)

        nxt = it + 1  # row edits take effect for the next iteration
        if nxt < sched.densify_end and nxt % sched.densify_interval == 0:
            cloud = standard_densify(
                cloud, stats, scene_extent,
                sched.densify_grad_frac * scene_extent,
                sched.densify_percent_dense, sched.opacity_eps,
                rng, followers=(opt,))
        elif (sched.use_igd and sched.densify_end <= nxt < sched.igd_end
              and nxt % sched.igd_interval == 0):
            res = igd_step(cloud, sched.igd_config(), scene_extent,
                           followers=(opt, stats))
            cloud = res.cloud

        if nxt % sched.log_interval == 0 or nxt == sched.total_iters:
            log_metrics(nxt, parts)
        if sched.checkpoint_interval and nxt % sched.checkpoint_interval == 0:
            checkpoint(nxt)

    if sched.total_iters == 0:
        log_metrics(0, parts)

    cloud = assign_groups(cloud, head)
    save_scene(cloud, head, out_dir / "final.gseg")
    metrics_path = out_dir / "metrics.csv"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["iter", "l1", "l2d", "l3d", "n_gaussians", "psnr_holdout"])
    for row in metrics_rows:
        writer.writerow([row[0], f"{row[1]:.9g}", f"{row[2]:.9g}", f"{row[3]:.9g}",
                         row[4], f"{row[5]:.9g}"])
    metrics_path.write_text(buf.getvalue())
    return TrainResult(cloud=cloud, head=head, metrics_path=metrics_path,
                       metrics_rows=metrics_rows)
