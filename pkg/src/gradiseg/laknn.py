"""Neighbor selection (global and direction-aware) and the 3D consistency loss.

The direction-aware variant keeps only candidates with a strictly positive
projection distance d_j = (p_j - p_i) . u onto the query direction u and takes
the K smallest, so neighbors behind or perpendicular to u are excluded. Both
search modes are contractually identical to exhaustive search, including the
ascending-index tie rule.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .scene import GaussianCloud
from .semantic import ClassifierHead, classify

PROB_FLOOR = 1e-12
EMA_FLOOR = 1e-12
_CHUNK = 128


@dataclass
class NeighborQuery:
    """One neighbor lookup: K neighbors of target_index, optionally restricted
    to the half-space along unit direction u (mode 'local-adaptive')."""

    target_index: int
    K: int = 5
    mode: str = "global"
    direction: np.ndarray | None = None

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.mode not in ("global", "local-adaptive"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "local-adaptive":
            if self.direction is None:
                raise ValueError("local-adaptive mode requires a direction")
            if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
                raise ValueError("direction must be a unit vector")


def neighbor_direction(cloud: GaussianCloud, i: int) -> np.ndarray | None:
    """Unit vector opposite the position-gradient EMA of Gaussian i.

    Returns None when the EMA is (numerically) zero; callers fall back to
    global search for that Gaussian.
    """
    g = cloud.pos_grad_ema[i]
    norm = np.linalg.norm(g)
    if norm < EMA_FLOOR:
        return None
    return -g / norm


def _smallest_k(dist_row: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k smallest finite entries, ties by ascending index."""
    finite = np.isfinite(dist_row)
    avail = int(finite.sum())
    take = min(k, avail)
    if take == 0:
        return np.empty(0, dtype=np.int64)
    part = np.argpartition(dist_row, take - 1)[:take]
    vals = dist_row[part]
    kth = vals.max()
    strict = np.nonzero(dist_row < kth)[0]
    need = take - strict.size
    at_kth = np.nonzero(dist_row == kth)[0][:need]
    out = np.concatenate([strict, at_kth])
    return out[np.lexsort((out, dist_row[out]))]


def local_adaptive_neighbors(cloud: GaussianCloud, i: int, u: np.ndarray,
                             k: int) -> np.ndarray:
    """K nearest neighbors of i by smallest strictly positive projection distance."""
    if k < 1:
        raise ValueError("K must be >= 1")
    u = np.asarray(u, dtype=np.float64)
    d = (cloud.positions.astype(np.float64) - cloud.positions[i].astype(np.float64)) @ u
    d[i] = -np.inf
    d = np.where(d > 0, d, np.inf)
    return _smallest_k(d, k)


def global_neighbors(cloud: GaussianCloud, i: int, k: int) -> np.ndarray:
    """K nearest neighbors of i by Euclidean distance, ties by ascending index."""
    if k < 1:
        raise ValueError("K must be >= 1")
    diff = cloud.positions.astype(np.float64) - cloud.positions[i].astype(np.float64)
    d = np.einsum("nj,nj->n", diff, diff)
    d[i] = np.inf
    return _smallest_k(d, k)


def find_neighbors(cloud: GaussianCloud, query: NeighborQuery) -> np.ndarray:
    if query.mode == "global":
        return global_neighbors(cloud, query.target_index, query.K)
    return local_adaptive_neighbors(cloud, query.target_index, query.direction, query.K)


def _neighbor_pairs(cloud: GaussianCloud, targets: np.ndarray, k: int,
                    mode: str) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized neighbor selection for many targets. Returns flat (i, j) pairs.

    Uses argpartition per chunk; rows with ties at the selection boundary (or
    fewer than k candidates) are repaired with the exact scalar path so the
    ascending-index tie rule always holds.
    """
    pos = cloud.positions
    n = cloud.n
    take = min(k, max(n - 1, 0))
    if take == 0 or targets.size == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    sq = np.einsum("nj,nj->n", pos, pos)
    pair_i, pair_j = [], []
    for lo in range(0, targets.size, _CHUNK):
        tgt = targets[lo:lo + _CHUNK]
        if mode == "local-adaptive":
            ema = cloud.pos_grad_ema[tgt]
            norms = np.linalg.norm(ema, axis=1)
            local = norms >= EMA_FLOOR
            u = np.zeros_like(ema)
            u[local] = -ema[local] / norms[local, None]
            d = u @ pos.T - np.einsum("tj,tj->t", u, pos[tgt])[:, None]
            d = np.where(d > 0, d, np.inf)
            # zero-EMA targets fall back to global euclidean search
            if not local.all():
                sub = tgt[~local]
                d[~local] = (sq[None, :] - 2.0 * (pos[sub] @ pos.T)
                             + sq[sub][:, None])
        else:
            d = sq[None, :] - 2.0 * (pos[tgt] @ pos.T) + sq[tgt][:, None]
        d[np.arange(tgt.size), tgt] = np.inf

        part = np.argpartition(d, take - 1, axis=1)[:, :take]
        vals = np.take_along_axis(d, part, axis=1)
        # canonical order inside the selection: by (value, index) via two
        # stable argsorts
        ord1 = np.argsort(part, axis=1, kind="stable")
        part = np.take_along_axis(part, ord1, axis=1)
        vals = np.take_along_axis(vals, ord1, axis=1)
        ord2 = np.argsort(vals, axis=1, kind="stable")
        part = np.take_along_axis(part, ord2, axis=1)
        vals = np.take_along_axis(vals, ord2, axis=1)

        kth = vals[:, -1]
        finite_kth = np.isfinite(kth)
        n_at_kth_row = (d == kth[:, None]).sum(axis=1)
        n_at_kth_sel = (vals == kth[:, None]).sum(axis=1)
        needs_repair = ~finite_kth | (n_at_kth_row != n_at_kth_sel)

        if not needs_repair.any():
            pair_i.append(np.repeat(tgt, take))
            pair_j.append(part.reshape(-1))
        else:
            ok = np.nonzero(~needs_repair)[0]
            pair_i.append(np.repeat(tgt[ok], take))
            pair_j.append(part[ok].reshape(-1))
            for row in np.nonzero(needs_repair)[0]:
                nb = _smallest_k(d[row], take)
                pair_i.append(np.full(nb.size, tgt[row], dtype=np.int64))
                pair_j.append(nb)
    return np.concatenate(pair_i), np.concatenate(pair_j)


def _scatter_add_rows(out: np.ndarray, index: np.ndarray, rows: np.ndarray) -> None:
    """out[index] += rows with duplicate indices, via sort + reduceat
    (deterministic and much faster than np.add.at)."""
    order = np.argsort(index, kind="stable")
    idx_sorted = index[order]
    starts = np.nonzero(np.concatenate([[True], idx_sorted[1:] != idx_sorted[:-1]]))[0]
    sums = np.add.reduceat(rows[order], starts, axis=0)
    out[idx_sorted[starts]] += sums


def kl_pairs_loss(encodings: np.ndarray, head: ClassifierHead,
                  pair_i: np.ndarray, pair_j: np.ndarray,
                  head_grads: bool = False):
    """Mean KL(F(e_i) || F(e_j)) over the given pairs, with encoding gradients.

    Returns (loss, dL/dencodings, (dL/dW, dL/db) or None). The classifier is
    treated as a constant unless head_grads is set.
    """
    n, d = encodings.shape
    dt = encodings.dtype
    grad_e = np.zeros((n, d), dtype=dt)
    if pair_i.size == 0:
        if head_grads:
            return 0.0, grad_e, (np.zeros_like(head.weights), np.zeros_like(head.biases))
        return 0.0, grad_e, None

    involved, inv = np.unique(np.concatenate([pair_i, pair_j]), return_inverse=True)
    ii, jj = inv[:pair_i.size], inv[pair_i.size:]
    p = classify(encodings[involved], head)
    logp = np.log(np.maximum(p, PROB_FLOOR))

    pi = p[ii]
    logdiff = logp[ii] - logp[jj]
    kl = np.einsum("pc,pc->p", pi, logdiff)
    m = pair_i.size
    loss = float(kl.sum() / m)

    # d/dz_i KL = P_i * (logdiff - KL);  d/dz_j KL = P_j - P_i.
    # Only W^T gz reaches the encodings, so project each pair's class-space
    # gradient through W first and scatter the narrow D-dim rows.
    w = head.weights.astype(dt)
    pw = p @ w                    # rows of P @ W per involved Gaussian
    ge_i = ((pi * logdiff) @ w - kl[:, None] * pw[ii]) / m
    ge_j = (pw[jj] - pw[ii]) / m
    ge_rows = np.zeros((involved.size, w.shape[1]), dtype=dt)
    _scatter_add_rows(ge_rows, ii, ge_i)
    _scatter_add_rows(ge_rows, jj, ge_j)
    grad_e[involved] = ge_rows

    hg = None
    if head_grads:
        gz = np.zeros_like(p)
        _scatter_add_rows(gz, ii, pi * (logdiff - kl[:, None]) / m)
        _scatter_add_rows(gz, jj, (p[jj] - pi) / m)
        feats = encodings[involved]
        hg = (gz.T @ feats, gz.sum(axis=0))
    return loss, grad_e, hg


def loss_3d(cloud: GaussianCloud, head: ClassifierHead, m: int, k: int,
            mode: str, rng_seed, head_grads: bool = False):
    """Neighborhood-consistency loss: sample M targets, pull each toward its
    neighbors' class distributions via KL divergence.

    Missing neighbors (fewer than K candidates) shrink the averaging
    denominator. Returns (loss, dL/dencodings, head grads or None).
    """
    if mode not in ("global", "local-adaptive"):
        raise ValueError(f"unknown mode {mode!r}")
    n = cloud.n
    if m > n:
        warnings.warn(f"requested {m} samples from {n} Gaussians; clamping")
        m = n
    if n == 0 or m == 0:
        empty = np.zeros_like(cloud.encodings)
        return 0.0, empty, ((np.zeros_like(head.weights), np.zeros_like(head.biases))
                            if head_grads else None)
    rng = np.random.default_rng(rng_seed)
    targets = rng.choice(n, size=m, replace=False)
    pair_i, pair_j = _neighbor_pairs(cloud, targets, k, mode)
    return kl_pairs_loss(cloud.encodings, head, pair_i, pair_j, head_grads=head_grads)
