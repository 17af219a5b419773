"""Gaussian scene representation, GSEG1 persistence and group-level editing.

The scene is stored struct-of-arrays: one ndarray per attribute, all row-aligned.
Row i of every array (including the gradient monitors) describes Gaussian i, and
every mutation (select/append) moves all arrays in lockstep.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

GSEG_MAGIC = b"GSEG1"
GSEG_VERSION = 1

QUAT_NORM_TOL = 1e-6       # validation tolerance on |r| - 1
QUAT_LOAD_DRIFT = 1e-4     # renormalize on load up to this drift, error beyond


class SceneFormatError(Exception):
    """Raised for malformed GSEG1 files or invariant-violating payloads."""


@dataclass
class Gaussian:
    """A single Gaussian: position, scale, rotation (wxyz), opacity, color, identity encoding."""

    position: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    color: np.ndarray
    encoding: np.ndarray

    def validate(self) -> None:
        if not np.all(self.scale > 0):
            raise ValueError("scale components must be strictly positive")
        if abs(np.linalg.norm(self.rotation) - 1.0) > QUAT_NORM_TOL:
            raise ValueError("rotation quaternion must be unit length")
        if not (0.0 <= self.opacity <= 1.0):
            raise ValueError("opacity out of range [0, 1]")
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise ValueError("color components out of range [0, 1]")
        if not np.all(np.isfinite(self.encoding)):
            raise ValueError("identity encoding must be finite")


@dataclass
class GroupTable:
    """Display metadata per group id. Id 0 is reserved for background."""

    num_classes: int = 256
    colors: dict[int, tuple[float, float, float]] = field(default_factory=dict)
    labels: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        self.colors.setdefault(0, (0.0, 0.0, 0.0))
        self.labels.setdefault(0, "background")

    def set_group(self, gid: int, color, label: str) -> None:
        if not (0 <= gid < self.num_classes):
            raise ValueError(f"group id {gid} outside [0, {self.num_classes})")
        self.colors[gid] = tuple(float(c) for c in color)
        self.labels[gid] = label

    def color_of(self, gid: int) -> tuple[float, float, float]:
        if gid in self.colors:
            return self.colors[gid]
        # deterministic fallback palette
        rng = np.random.default_rng(gid)
        return tuple(rng.uniform(0.2, 1.0, 3))


class GaussianCloud:
    """The trainable scene: N Gaussians plus per-Gaussian gradient monitors.

    Arrays:
      positions (N,3), scales (N,3) strictly positive, rotations (N,4) unit wxyz,
      opacities (N,), colors (N,3), encodings (N,D), group_ids (N,) int32 with -1
      meaning unassigned, id_grad_accum (N,) summed identity-gradient norms,
      id_grad_vec (N,D) summed identity-gradient vectors (alternative monitor),
      pos_grad_ema (N,3), visible_count (N,) int64.
    """

    def __init__(self, positions, scales, rotations, opacities, colors, encodings,
                 group_ids=None, id_grad_accum=None, id_grad_vec=None,
                 pos_grad_ema=None, visible_count=None):
        dtype = np.asarray(positions).dtype
        if dtype not in (np.float32, np.float64):
            dtype = np.float64
        n = len(positions)
        self.positions = np.ascontiguousarray(positions, dtype=dtype).reshape(n, 3)
        self.scales = np.ascontiguousarray(scales, dtype=dtype).reshape(n, 3)
        self.rotations = np.ascontiguousarray(rotations, dtype=dtype).reshape(n, 4)
        self.opacities = np.ascontiguousarray(opacities, dtype=dtype).reshape(n)
        self.colors = np.ascontiguousarray(colors, dtype=dtype).reshape(n, 3)
        enc = np.ascontiguousarray(encodings, dtype=dtype)
        self.encodings = enc if enc.ndim == 2 else enc.reshape(n, -1)
        if self.encodings.shape[0] != n:
            raise ValueError("encodings row count does not match positions")
        self.group_ids = (np.full(n, -1, dtype=np.int32) if group_ids is None
                          else np.ascontiguousarray(group_ids, dtype=np.int32).reshape(n))
        d = self.encodings.shape[1]
        self.id_grad_accum = (np.zeros(n, dtype=dtype) if id_grad_accum is None
                              else np.ascontiguousarray(id_grad_accum, dtype=dtype).reshape(n))
        self.id_grad_vec = (np.zeros((n, d), dtype=dtype) if id_grad_vec is None
                            else np.ascontiguousarray(id_grad_vec, dtype=dtype).reshape(n, d))
        self.pos_grad_ema = (np.zeros((n, 3), dtype=dtype) if pos_grad_ema is None
                             else np.ascontiguousarray(pos_grad_ema, dtype=dtype).reshape(n, 3))
        self.visible_count = (np.zeros(n, dtype=np.int64) if visible_count is None
                              else np.ascontiguousarray(visible_count, dtype=np.int64).reshape(n))

    # -- basic queries -------------------------------------------------------

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def __len__(self) -> int:
        return self.n

    @property
    def dim(self) -> int:
        return self.encodings.shape[1]

    @property
    def dtype(self):
        return self.positions.dtype

    @classmethod
    def empty(cls, dim: int = 16, dtype=np.float32) -> "GaussianCloud":
        z = lambda *shape: np.zeros(shape, dtype=dtype)
        return cls(z(0, 3), z(0, 3), z(0, 4), z(0), z(0, 3), z(0, dim))

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(
            position=self.positions[i].copy(),
            scale=self.scales[i].copy(),
            rotation=self.rotations[i].copy(),
            opacity=float(self.opacities[i]),
            color=self.colors[i].copy(),
            encoding=self.encodings[i].copy(),
        )

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            self.positions.copy(), self.scales.copy(), self.rotations.copy(),
            self.opacities.copy(), self.colors.copy(), self.encodings.copy(),
            self.group_ids.copy(), self.id_grad_accum.copy(), self.id_grad_vec.copy(),
            self.pos_grad_ema.copy(), self.visible_count.copy(),
        )

    def astype(self, dtype) -> "GaussianCloud":
        c = self.copy()
        for name in ("positions", "scales", "rotations", "opacities", "colors",
                     "encodings", "id_grad_accum", "id_grad_vec", "pos_grad_ema"):
            setattr(c, name, getattr(c, name).astype(dtype))
        return c

    def scene_extent(self) -> float:
        """Diagonal length of the positions' axis-aligned bounding box (1.0 for N < 2)."""
        if self.n < 2:
            return 1.0
        span = self.positions.max(axis=0) - self.positions.min(axis=0)
        ext = float(np.linalg.norm(span))
        return ext if ext > 0 else 1.0

    # -- invariants ----------------------------------------------------------

    def validate(self) -> None:
        n, d = self.n, self.dim
        for name, shape in (("positions", (n, 3)), ("scales", (n, 3)),
                            ("rotations", (n, 4)), ("opacities", (n,)),
                            ("colors", (n, 3)), ("encodings", (n, d)),
                            ("group_ids", (n,)), ("id_grad_accum", (n,)),
                            ("id_grad_vec", (n, d)), ("pos_grad_ema", (n, 3)),
                            ("visible_count", (n,))):
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
        if n == 0:
            return
        if not np.all(self.scales > 0):
            raise ValueError("scale components must be strictly positive")
        norms = np.linalg.norm(self.rotations, axis=1)
        if np.max(np.abs(norms - 1.0)) > QUAT_NORM_TOL:
            raise ValueError("rotation quaternions must be unit length")
        if np.any(self.opacities < 0) or np.any(self.opacities > 1):
            raise ValueError("opacity out of range")
        if np.any(self.colors < 0) or np.any(self.colors > 1):
            raise ValueError("color components out of range")
        if not np.all(np.isfinite(self.encodings)):
            raise ValueError("identity encodings must be finite")
        if np.any(self.id_grad_accum < 0):
            raise ValueError("id_grad_accum must be non-negative")
        if np.any(self.visible_count < 0):
            raise ValueError("visible_count must be non-negative")

    # -- row edits (keep every array in lockstep) ----------------------------

    def select(self, index) -> "GaussianCloud":
        """New cloud with rows `index` (bool mask or index array), order preserved."""
        return GaussianCloud(
            self.positions[index], self.scales[index], self.rotations[index],
            self.opacities[index], self.colors[index], self.encodings[index],
            self.group_ids[index], self.id_grad_accum[index], self.id_grad_vec[index],
            self.pos_grad_ema[index], self.visible_count[index],
        )

    def append(self, other: "GaussianCloud") -> "GaussianCloud":
        """New cloud = self rows followed by other's rows."""
        if other.dim != self.dim:
            raise ValueError("encoding dimension mismatch")
        cat = lambda a, b: np.concatenate([a, b], axis=0)
        return GaussianCloud(
            cat(self.positions, other.positions.astype(self.dtype)),
            cat(self.scales, other.scales.astype(self.dtype)),
            cat(self.rotations, other.rotations.astype(self.dtype)),
            cat(self.opacities, other.opacities.astype(self.dtype)),
            cat(self.colors, other.colors.astype(self.dtype)),
            cat(self.encodings, other.encodings.astype(self.dtype)),
            cat(self.group_ids, other.group_ids),
            cat(self.id_grad_accum, other.id_grad_accum.astype(self.dtype)),
            cat(self.id_grad_vec, other.id_grad_vec.astype(self.dtype)),
            cat(self.pos_grad_ema, other.pos_grad_ema.astype(self.dtype)),
            cat(self.visible_count, other.visible_count),
        )

    def reset_monitors(self) -> None:
        self.id_grad_accum[:] = 0
        self.id_grad_vec[:] = 0
        self.visible_count[:] = 0


# -- persistence (GSEG1 container) -------------------------------------------
#
# Layout: b"GSEG1", u32 version=1, u32 N, u32 D, u32 C, then little-endian
# float32 arrays positions N*3, scales N*3, rotations N*4, opacities N,
# colors N*3, encodings N*D, int32 group_ids N, float32 head weights C*D
# and biases C.


def save_scene(cloud: GaussianCloud, head, path) -> None:
    """Write cloud + classifier head to `path`. Refuses invariant-violating scenes."""
    cloud.validate()
    if not np.all(np.isfinite(head.weights)) or not np.all(np.isfinite(head.biases)):
        raise ValueError("classifier head must be finite")
    n, d = cloud.n, cloud.dim
    c = head.weights.shape[0]
    if head.weights.shape != (c, d) or head.biases.shape != (c,):
        raise ValueError("head shapes inconsistent with cloud encoding dimension")
    parts = [
        GSEG_MAGIC,
        struct.pack("<IIII", GSEG_VERSION, n, d, c),
        cloud.positions.astype("<f4").tobytes(),
        cloud.scales.astype("<f4").tobytes(),
        cloud.rotations.astype("<f4").tobytes(),
        cloud.opacities.astype("<f4").tobytes(),
        cloud.colors.astype("<f4").tobytes(),
        cloud.encodings.astype("<f4").tobytes(),
        cloud.group_ids.astype("<i4").tobytes(),
        head.weights.astype("<f4").tobytes(),
        head.biases.astype("<f4").tobytes(),
    ]
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_scene(path):
    """Load a GSEG1 file. Returns (GaussianCloud, ClassifierHead), float32 arrays.

    Quaternions with norm drift up to 1e-4 are renormalized; larger drift,
    out-of-range opacities/colors or non-positive scales are errors.
    """
    from .semantic import ClassifierHead

    with open(path, "rb") as f:
        blob = f.read()
    if blob[:5] != GSEG_MAGIC:
        raise SceneFormatError("bad magic: not a GSEG1 file")
    if len(blob) < 21:
        raise SceneFormatError("truncated header")
    version, n, d, c = struct.unpack_from("<IIII", blob, 5)
    if version != GSEG_VERSION:
        raise SceneFormatError(f"unsupported version {version}")
    counts_f4 = [n * 3, n * 3, n * 4, n, n * 3, n * d]
    total = 21 + 4 * (sum(counts_f4) + n + c * d + c)
    if len(blob) < total:
        raise SceneFormatError("truncated payload")

    off = 21
    arrs = []
    for cnt in counts_f4:
        arrs.append(np.frombuffer(blob, dtype="<f4", count=cnt, offset=off).copy())
        off += 4 * cnt
    group_ids = np.frombuffer(blob, dtype="<i4", count=n, offset=off).copy()
    off += 4 * n
    w = np.frombuffer(blob, dtype="<f4", count=c * d, offset=off).copy().reshape(c, d)
    off += 4 * c * d
    b = np.frombuffer(blob, dtype="<f4", count=c, offset=off).copy()

    positions = arrs[0].reshape(n, 3)
    scales = arrs[1].reshape(n, 3)
    rotations = arrs[2].reshape(n, 4)
    opacities = arrs[3]
    colors = arrs[4].reshape(n, 3)
    encodings = arrs[5].reshape(n, d)

    if n > 0:
        if np.any(opacities < 0) or np.any(opacities > 1):
            raise SceneFormatError("opacity out of range")
        if not np.all(scales > 0):
            raise SceneFormatError("non-positive scale")
        if np.any(colors < 0) or np.any(colors > 1):
            raise SceneFormatError("color out of range")
        if not np.all(np.isfinite(encodings)):
            raise SceneFormatError("non-finite identity encoding")
        norms = np.linalg.norm(rotations, axis=1)
        drift = np.abs(norms - 1.0)
        if np.any(drift > QUAT_LOAD_DRIFT):
            raise SceneFormatError("quaternion norm drift beyond tolerance")
        # renormalize only rows that violate the in-memory tolerance, so a
        # save -> load -> save cycle is byte-identical for valid scenes
        fix = drift > QUAT_NORM_TOL
        if fix.any():
            rotations = rotations.copy()
            rotations[fix] /= norms[fix, None]

    cloud = GaussianCloud(positions, scales, rotations, opacities, colors,
                          encodings, group_ids)
    head = ClassifierHead(w, b)
    return cloud, head


# -- grouping and edits --------------------------------------------------------


def assign_groups(cloud: GaussianCloud, head, min_confidence: float | None = None) -> GaussianCloud:
    """Set each Gaussian's group_id to the argmax class of head logits on its encoding.

    Ties resolve to the lowest class index. With `min_confidence`, Gaussians whose
    softmax confidence falls below it stay at -1 (unassigned).
    """
    if not np.all(np.isfinite(head.weights)) or not np.all(np.isfinite(head.biases)):
        raise ValueError("classifier head must be finite")
    out = cloud.copy()
    if cloud.n == 0:
        return out
    logits = cloud.encodings @ head.weights.T + head.biases
    gids = np.argmax(logits, axis=1).astype(np.int32)
    if min_confidence is not None:
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        conf = p[np.arange(cloud.n), gids]
        gids = np.where(conf >= min_confidence, gids, np.int32(-1))
    out.group_ids = gids
    return out


def _require_groups(cloud: GaussianCloud) -> None:
    if cloud.n > 0 and np.all(cloud.group_ids < 0):
        raise ValueError("groups not assigned; run assign_groups first")


def remove_group(cloud: GaussianCloud, gid: int) -> GaussianCloud:
    """Drop every Gaussian of group `gid` (accumulators filtered consistently)."""
    _require_groups(cloud)
    mask = cloud.group_ids != gid
    if mask.all():
        warnings.warn(f"group {gid} not present; remove_group is a no-op")
        return cloud.copy()
    return cloud.select(mask)


def extract_group(cloud: GaussianCloud, gid: int) -> GaussianCloud:
    """Keep only the Gaussians of group `gid`."""
    _require_groups(cloud)
    mask = cloud.group_ids == gid
    if not mask.any():
        warnings.warn(f"group {gid} not present; extract_group returns empty cloud")
    return cloud.select(mask)


def recolor_group(cloud: GaussianCloud, gid: int, rgb) -> GaussianCloud:
    """Set the color of every Gaussian in group `gid` to `rgb`."""
    _require_groups(cloud)
    rgb = np.asarray(rgb, dtype=cloud.dtype)
    if rgb.shape != (3,) or np.any(rgb < 0) or np.any(rgb > 1):
        raise ValueError("rgb must be three components in [0, 1]")
    mask = cloud.group_ids == gid
    if not mask.any():
        warnings.warn(f"group {gid} not present; recolor_group is a no-op")
        return cloud.copy()
    out = cloud.copy()
    out.colors[mask] = rgb
    return out
