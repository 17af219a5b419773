"""Quaternion helpers (w, x, y, z convention), vectorized over leading axes."""

from __future__ import annotations

import numpy as np


def quat_normalize(q: np.ndarray) -> np.ndarray:
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Rotation matrices (..., 3, 3) from unit quaternions (..., 4).

    Inputs are normalized first, so the map is scale-invariant in q.
    """
    q = quat_normalize(np.asarray(q))
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rot_grad_to_quat_grad(q_raw: np.ndarray, gR: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. R(q/|q|) back to the raw quaternion.

    q_raw: (..., 4) possibly non-unit quaternions as stored.
    gR:    (..., 3, 3) upstream gradient on the rotation matrix.
    Returns (..., 4). At |q| = 1 the result is tangent to the unit sphere.
    """
    q_raw = np.asarray(q_raw)
    norm = np.linalg.norm(q_raw, axis=-1, keepdims=True)
    q = q_raw / norm
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    zero = np.zeros_like(w)

    def mat(rows):
        return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    dR_dw = 2 * mat([[zero, -z, y], [z, zero, -x], [-y, x, zero]])
    dR_dx = 2 * mat([[zero, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    dR_dy = 2 * mat([[-2 * y, x, w], [x, zero, z], [-w, z, -2 * y]])
    dR_dz = 2 * mat([[-2 * z, -w, x], [w, -2 * z, y], [x, y, zero]])

    g_unit = np.stack([
        np.einsum("...ij,...ij->...", gR, d) for d in (dR_dw, dR_dx, dR_dy, dR_dz)
    ], axis=-1)
    # chain through q = q_raw / |q_raw|
    proj = g_unit - np.sum(g_unit * q, axis=-1, keepdims=True) * q
    return proj / norm
