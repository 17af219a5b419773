"""Neighbor selection against exhaustive search; KL consistency loss."""

import numpy as np
import pytest

from conftest import random_cloud
from gradiseg.laknn import (NeighborQuery, find_neighbors, global_neighbors,
                            kl_pairs_loss, local_adaptive_neighbors, loss_3d,
                            neighbor_direction)
from gradiseg.scene import GaussianCloud
from gradiseg.semantic import ClassifierHead


def points_cloud(points, dim=4):
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    quat = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    return GaussianCloud(points, np.full((n, 3), 0.1), quat,
                         np.full(n, 0.5), np.full((n, 3), 0.5),
                         np.zeros((n, dim)))


def exhaustive_local(points, i, u, k):
    """Reference: all strictly positive projections, k smallest, ties by index."""
    cands = []
    for j, p in enumerate(points):
        if j == i:
            continue
        d = float(np.dot(p - points[i], u))
        if d > 0:
            cands.append((d, j))
    cands.sort()
    return [j for _, j in cands[:k]]


def exhaustive_global(points, i, k):
    cands = sorted((float(np.dot(p - points[i], p - points[i])), j)
                   for j, p in enumerate(points) if j != i)
    return [j for _, j in cands[:k]]


class TestNeighborDirection:
    def test_negates_and_normalizes(self):
        cloud = points_cloud([[0, 0, 0], [1, 1, 1]])
        cloud.pos_grad_ema[0] = [0.0, -2.0, 0.0]
        np.testing.assert_allclose(neighbor_direction(cloud, 0), [0.0, 1.0, 0.0])

    def test_zero_ema_returns_none(self):
        cloud = points_cloud([[0, 0, 0], [1, 1, 1]])
        assert neighbor_direction(cloud, 0) is None

    def test_unit_norm_and_opposition(self, rng):
        cloud = points_cloud(rng.standard_normal((20, 3)))
        cloud.pos_grad_ema[:] = rng.standard_normal((20, 3))
        for i in range(20):
            u = neighbor_direction(cloud, i)
            assert np.linalg.norm(u) == pytest.approx(1.0, abs=1e-12)
            assert float(u @ cloud.pos_grad_ema[i]) < 0


class TestLocalAdaptive:
    def test_worked_example(self):
        # target at origin, u = +x; candidates at x=-1, x=1, x=2 and (0,5,0)
        pts = [[0, 0, 0], [-1, 0, 0], [1, 0, 0], [2, 0, 0], [0, 5, 0]]
        cloud = points_cloud(pts)
        got = local_adaptive_neighbors(cloud, 0, np.array([1.0, 0.0, 0.0]), 2)
        assert sorted(got.tolist()) == [2, 3]  # x=1 and x=2 only

    def test_all_behind_empty(self):
        pts = [[0, 0, 0], [-1, 0, 0], [-2, 0.3, 0], [0, 1, 0]]
        cloud = points_cloud(pts)
        got = local_adaptive_neighbors(cloud, 0, np.array([1.0, 0.0, 0.0]), 3)
        assert got.size == 0

    def test_matches_exhaustive_search(self, rng):
        for n in (10, 100, 500):
            pts = rng.uniform(-1, 1, (n, 3))
            cloud = points_cloud(pts)
            for _ in range(10):
                i = int(rng.integers(n))
                u = rng.standard_normal(3)
                u /= np.linalg.norm(u)
                for k in (1, 5, 20):
                    got = local_adaptive_neighbors(cloud, i, u, k)
                    assert sorted(got.tolist()) == sorted(exhaustive_local(pts, i, u, k))

    def test_tie_by_ascending_index(self):
        pts = [[0, 0, 0], [1, 5, 0], [1, -5, 0], [1, 0, 5]]  # equal projections
        cloud = points_cloud(pts)
        got = local_adaptive_neighbors(cloud, 0, np.array([1.0, 0.0, 0.0]), 2)
        assert got.tolist() == [1, 2]

    def test_subset_of_positive_halfspace(self, rng):
        pts = rng.standard_normal((100, 3))
        cloud = points_cloud(pts)
        u = np.array([0.0, 0.0, 1.0])
        got = local_adaptive_neighbors(cloud, 3, u, 10)
        for j in got:
            assert (pts[j] - pts[3]) @ u > 0


class TestGlobal:
    def test_two_points(self):
        cloud = points_cloud([[0, 0, 0], [1, 0, 0]])
        assert global_neighbors(cloud, 0, 1).tolist() == [1]

    def test_grid_matches_exhaustive(self, rng):
        xs = np.linspace(0, 1, 4)
        pts = np.array([[x, y, z] for x in xs for y in xs for z in xs])
        cloud = points_cloud(pts)
        for i in (0, 17, 63):
            for k in (1, 5, 20):
                got = global_neighbors(cloud, i, k)
                assert sorted(got.tolist()) == sorted(exhaustive_global(pts, i, k))

    def test_saturation(self, rng):
        pts = rng.standard_normal((6, 3))
        cloud = points_cloud(pts)
        got = global_neighbors(cloud, 2, 99)
        assert sorted(got.tolist()) == [0, 1, 3, 4, 5]

    def test_query_dispatch(self, rng):
        pts = rng.standard_normal((30, 3))
        cloud = points_cloud(pts)
        q = NeighborQuery(target_index=4, K=3, mode="global")
        np.testing.assert_array_equal(find_neighbors(cloud, q),
                                      global_neighbors(cloud, 4, 3))
        with pytest.raises(ValueError, match="unit"):
            NeighborQuery(target_index=0, K=2, mode="local-adaptive",
                          direction=np.array([1.0, 1.0, 0.0]))


class TestLoss3d:
    def head(self, c=6, d=4, seed=0):
        rng = np.random.default_rng(seed)
        return ClassifierHead(rng.standard_normal((c, d)), rng.standard_normal(c))

    def test_identical_encodings_zero_loss(self, rng):
        cloud = points_cloud(rng.standard_normal((30, 3)))
        cloud.encodings[:] = np.array([0.3, -0.2, 0.5, 0.1])
        loss, grads, _ = loss_3d(cloud, self.head(), 10, 3, "global", 0)
        assert loss == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(grads, 0.0, atol=1e-12)

    def test_two_class_scalar_example(self):
        # F(e_i)=(0.9,0.1), F(e_j)=(0.5,0.5): KL = 0.9 ln(1.8) + 0.1 ln(0.2)
        head = ClassifierHead(np.array([[1.0], [0.0]]), np.zeros(2))
        e_i = np.array([[np.log(9.0)], [0.0]])  # softmax -> (0.9, 0.1), (0.5, 0.5)
        loss, _, _ = kl_pairs_loss(e_i, head, np.array([0]), np.array([1]))
        expect = 0.9 * np.log(0.9 / 0.5) + 0.1 * np.log(0.1 / 0.5)
        assert loss == pytest.approx(expect, abs=1e-12)
        assert loss == pytest.approx(0.3681, abs=1e-4)

    def test_matches_double_loop_reference(self, rng):
        cloud = points_cloud(rng.uniform(-1, 1, (40, 3)))
        cloud.encodings[:] = rng.standard_normal((40, 4)) * 0.7
        head = self.head()
        m, k, seed = 12, 3, 99
        loss, _, _ = loss_3d(cloud, head, m, k, "global", seed)

        # naive reference: same sampling, scalar softmax/KL per pair
        targets = np.random.default_rng(seed).choice(40, size=m, replace=False)
        total, pairs = 0.0, 0
        for i in targets:
            for j in exhaustive_global(cloud.positions, i, k):
                zi = head.weights @ cloud.encodings[i] + head.biases
                zj = head.weights @ cloud.encodings[j] + head.biases
                pi = np.exp(zi - zi.max()); pi /= pi.sum()
                pj = np.exp(zj - zj.max()); pj /= pj.sum()
                total += float(np.sum(pi * (np.log(pi) - np.log(pj))))
                pairs += 1
        assert loss == pytest.approx(total / pairs, abs=1e-9)

    def test_nonnegative_on_random_draws(self, rng):
        head = self.head()
        for _ in range(50):
            cloud = points_cloud(rng.uniform(-1, 1, (15, 3)))
            cloud.encodings[:] = rng.standard_normal((15, 4))
            loss, _, _ = loss_3d(cloud, head, 5, 3, "global", int(rng.integers(1e6)))
            assert loss >= 0.0

    def test_m_clamped_with_warning(self, rng):
        cloud = points_cloud(rng.standard_normal((5, 3)))
        with pytest.warns(UserWarning, match="clamp"):
            loss_3d(cloud, self.head(), 10, 2, "global", 0)

    def test_local_mode_uses_ema_direction(self, rng):
        # a target whose EMA points -x must pick neighbors with +x projection
        pts = np.array([[0.0, 0, 0], [0.5, 0, 0], [-0.5, 0, 0], [1.0, 0, 0]])
        cloud = points_cloud(pts)
        cloud.pos_grad_ema[:] = [-1.0, 0.0, 0.0]  # direction u = +x
        cloud.encodings[:] = rng.standard_normal((4, 4))
        head = self.head()
        loss_local, _, _ = loss_3d(cloud, head, 4, 2, "local-adaptive", 1)
        # reference with explicit pairs
        pair_i, pair_j = [], []
        for i in range(4):
            for j in exhaustive_local(pts, i, np.array([1.0, 0, 0]), 2):
                pair_i.append(i)
                pair_j.append(j)
        ref, _, _ = kl_pairs_loss(cloud.encodings, head,
                                  np.array(pair_i), np.array(pair_j))
        assert loss_local == pytest.approx(ref, abs=1e-12)

    def test_encoding_gradients_finite_difference(self, rng):
        cloud = points_cloud(rng.uniform(-1, 1, (8, 3)))
        cloud.encodings[:] = rng.standard_normal((8, 4)) * 0.5
        head = self.head(c=5)
        loss, grads, _ = loss_3d(cloud, head, 6, 3, "global", 7)
        h = 1e-6
        for ix in np.ndindex(8, 4):
            cp, cm = cloud.copy(), cloud.copy()
            cp.encodings[ix] += h
            cm.encodings[ix] -= h
            lp, _, _ = loss_3d(cp, head, 6, 3, "global", 7)
            lm, _, _ = loss_3d(cm, head, 6, 3, "global", 7)
            fd = (lp - lm) / (2 * h)
            assert grads[ix] == pytest.approx(fd, rel=1e-4, abs=1e-8)

    def test_head_gradients_finite_difference(self, rng):
        cloud = points_cloud(rng.uniform(-1, 1, (6, 3)))
        cloud.encodings[:] = rng.standard_normal((6, 4)) * 0.5
        head = self.head(c=4)
        _, _, (dw, db) = loss_3d(cloud, head, 4, 2, "global", 3, head_grads=True)
        h = 1e-6
        for ix in np.ndindex(*head.weights.shape):
            hp, hm = head.copy(), head.copy()
            hp.weights[ix] += h
            hm.weights[ix] -= h
            lp, _, _ = loss_3d(cloud, hp, 4, 2, "global", 3)
            lm, _, _ = loss_3d(cloud, hm, 4, 2, "global", 3)
            fd = (lp - lm) / (2 * h)
            assert dw[ix] == pytest.approx(fd, rel=1e-4, abs=1e-8)
        for c in range(4):
            hp, hm = head.copy(), head.copy()
            hp.biases[c] += h
            hm.biases[c] -= h
            lp, _, _ = loss_3d(cloud, hp, 4, 2, "global", 3)
            lm, _, _ = loss_3d(cloud, hm, 4, 2, "global", 3)
            fd = (lp - lm) / (2 * h)
            assert db[c] == pytest.approx(fd, rel=1e-4, abs=1e-8)

    def test_default_mode_head_constant(self, rng):
        cloud = points_cloud(rng.uniform(-1, 1, (6, 3)))
        cloud.encodings[:] = rng.standard_normal((6, 4))
        _, _, hg = loss_3d(cloud, self.head(), 4, 2, "global", 0)
        assert hg is None
