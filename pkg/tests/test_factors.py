import math

import numpy as np
import pytest
from scipy.stats import chi2

from memtree.factors import (
    CHI2_4DOF_95,
    DEFAULT_COVARIANCE,
    LOOP,
    SEQUENTIAL,
    RelEdge,
    cauchy_cost,
    cauchy_weight,
    chi2_terms,
    edge_jacobian,
    edge_residual,
    global_jacobians,
    mahalanobis_sq,
    residual_from_poses,
    residuals_global,
)
from memtree.geometry import IDENTITY, Pose4, compose, relative
from memtree.tree import MemoryTree

from conftest import random_pose


def random_tree(rng, n):
    t = MemoryTree()
    for k in rng.permutation(n):
        t.insert(int(k), random_pose(rng))
    return t


def fd_jacobian(tree, edge, lca, keys, h=1e-6):
    cols = []
    for k in keys:
        base = tree.rel_pose(k)
        for d in range(4):
            out = []
            for sgn in (1, -1):
                v = list(base)
                v[d] += sgn * h
                tree.set_rel_pose(k, Pose4(v[0], v[1:]))
                out.append(edge_residual(tree, edge, lca))
            tree.set_rel_pose(k, base)
            diff = out[0] - out[1]
            diff[0] = math.remainder(diff[0], 2 * math.pi)
            cols.append(diff / (2 * h))
    return np.array(cols).T


class TestRelEdge:
    def test_validation(self):
        with pytest.raises(ValueError):
            RelEdge(1, 1, IDENTITY)
        with pytest.raises(ValueError):
            RelEdge(1, 2, IDENTITY, cov=(0.1, 0.0, 0.1, 0.1))
        with pytest.raises(ValueError):
            RelEdge(1, 2, IDENTITY, cov=(0.1, 0.1, 0.1))
        with pytest.raises(ValueError):
            RelEdge(1, 2, IDENTITY, kind="odd")
        e = RelEdge(1, 2, IDENTITY)
        assert e.kind == LOOP and e.cov == DEFAULT_COVARIANCE
        assert e.info == pytest.approx((100, 25, 25, 25))

    def test_gamma_matches_inverse_cdf(self):
        assert CHI2_4DOF_95 == pytest.approx(chi2.ppf(0.95, 4), abs=1e-4)


class TestResidual:
    def test_examples(self):
        gi = IDENTITY
        gj = Pose4(math.pi / 2, (1, 0, 0))
        r = residual_from_poses(gi, gj, Pose4(math.pi / 2, (1, 0, 0)))
        assert np.allclose(r, 0, atol=1e-15)
        r = residual_from_poses(gi, gj, Pose4(math.pi / 2, (1.1, 0, 0)))
        assert np.allclose(r, (0, 0.1, 0, 0), atol=1e-12)

    def test_yaw_wrapped_position_not(self):
        r = residual_from_poses(Pose4(3.0), Pose4(-3.0), Pose4(0.0, (100, 0, 0)))
        assert r[0] == pytest.approx(math.remainder(-(2 * math.pi - 6.0), 2 * math.pi))
        assert abs(r[0]) < math.pi
        assert r[1] == 100.0

    def test_exact_on_composed_measurements(self, rng):
        t = random_tree(rng, 60)
        g = t.all_global_poses()
        for _ in range(200):
            i, j = (int(x) for x in rng.choice(60, 2, replace=False))
            e = RelEdge(i, j, relative(g[i], g[j]))
            assert np.abs(edge_residual(t, e)).max() < 1e-12

    def test_frame_invariance(self, rng):
        t = random_tree(rng, 80)
        g = t.all_global_poses()
        root = t.root.key
        for _ in range(300):
            i, j = (int(x) for x in rng.choice(80, 2, replace=False))
            e = RelEdge(i, j, random_pose(rng))
            via_lca = edge_residual(t, e)
            via_root = edge_residual(t, e, lca=root)
            glob = residual_from_poses(g[i], g[j], e.meas)
            assert np.abs(via_lca - glob).max() < 1e-12
            assert np.abs(via_root - glob).max() < 1e-12
            # an arbitrary shared frame
            f = random_pose(rng)
            moved = residual_from_poses(compose(f, g[i]), compose(f, g[j]), e.meas)
            assert np.abs(moved - glob).max() < 1e-11

    def test_bad_lca(self, rng):
        t = random_tree(rng, 15)
        leaf = next(k for k in t.keys() if t.node(k).left is None and t.node(k).right is None)
        other = next(k for k in t.keys() if not t.is_ancestor(leaf, k))
        with pytest.raises(ValueError):
            edge_residual(t, RelEdge(other, t.root.key, IDENTITY), lca=leaf)

    def test_mahalanobis(self):
        assert mahalanobis_sq((0.1, 0.2, 0, 0), (0.01, 0.04, 1, 1)) == pytest.approx(2.0)
        r = np.array([[0.1, 0.2, 0, 0], [0, 0, 0, 1.0]])
        info = np.array([[100, 25, 1, 1], [1, 1, 1, 4.0]])
        assert np.allclose(chi2_terms(r, info), [2.0, 4.0])


class TestJacobian:
    def test_identity_chain_structure(self):
        t = MemoryTree()
        for k in range(7):
            t.insert(k, IDENTITY)
        e = RelEdge(0, 6, IDENTITY)
        lca = t.lca(0, 6)
        keys = [k for k in t.path(0, 6) if k != lca]
        J, got = edge_jacobian(t, e, lca, keys)
        for b, k in enumerate(got):
            sign = 1.0 if t.is_ancestor(k, 0) else -1.0
            assert np.allclose(J[:, 4 * b:4 * b + 4], sign * np.eye(4), atol=1e-15)

    def test_fixed_only_chain_is_empty(self, rng):
        t = random_tree(rng, 7)
        J, keys = edge_jacobian(t, RelEdge(0, 6, IDENTITY), t.lca(0, 6), [])
        assert J.shape == (4, 0) and keys == []

    def test_single_variable(self):
        t = MemoryTree()
        t.insert(0, IDENTITY)
        t.insert(1, Pose4(0.3, (1.0, 0.2, 0.0)))
        e = RelEdge(0, 1, Pose4(0.25, (1.1, 0.1, 0.05)))
        J, keys = edge_jacobian(t, e, 0, [1])
        assert keys == [1]
        fd = fd_jacobian(t, e, 0, keys)
        assert np.abs(J - fd).max() <= 1e-5 * max(1.0, np.abs(fd).max())

    def test_random_configurations(self, rng):
        for trial in range(1000):
            if trial % 100 == 0:
                t = random_tree(rng, 31)
            i, j = (int(x) for x in rng.choice(31, 2, replace=False))
            lca = t.lca(i, j)
            keys = [k for k in t.path(i, j) if k != lca]
            e = RelEdge(i, j, random_pose(rng, 2.0))
            J, got = edge_jacobian(t, e, lca, keys)
            fd = fd_jacobian(t, e, lca, got)
            assert np.abs(J - fd).max() <= 1e-5 * max(1.0, np.abs(fd).max()), trial

    def test_global_blocks_match_fd(self, rng):
        for _ in range(100):
            u, v, m = random_pose(rng), random_pose(rng), random_pose(rng)
            meas = np.array([list(m)])

            def res(uu, vv):
                r, _ = residuals_global(np.array([uu[0]]), np.array([uu[1:]]),
                                        np.array([vv[0]]), np.array([vv[1:]]), meas)
                return r[0]

            _, rel_t = residuals_global(np.array([u[0]]), np.array([u[1:]]),
                                        np.array([v[0]]), np.array([v[1:]]), meas)
            ju, jv = global_jacobians(np.array([u[0]]), rel_t)
            for which, blk in ((0, ju[0]), (1, jv[0])):
                fd = np.zeros((4, 4))
                for d in range(4):
                    hi = [np.array(u, float), np.array(v, float)]
                    lo = [np.array(u, float), np.array(v, float)]
                    hi[which][d] += 1e-6
                    lo[which][d] -= 1e-6
                    diff = res(*hi) - res(*lo)
                    diff[0] = math.remainder(diff[0], 2 * math.pi)
                    fd[:, d] = diff / 2e-6
                assert np.abs(blk - fd).max() < 1e-5 * max(1.0, np.abs(fd).max())


class TestCauchy:
    def test_values(self):
        assert cauchy_cost(0.0) == 0.0
        assert cauchy_cost(1.0) == pytest.approx(math.log(2))
        assert cauchy_cost(8.0, c=2.0) == pytest.approx(4 * math.log(3))
        with pytest.raises(ValueError):
            cauchy_cost(-1e-3)

    def test_shape(self):
        s = np.geomspace(1e-12, 1e6, 400)
        rho = cauchy_cost(s)
        assert np.all(np.diff(rho) > 0)
        assert np.all(rho <= s)
        assert rho[0] / s[0] == pytest.approx(1.0, rel=1e-9)

    def test_weight_is_derivative(self):
        s = np.linspace(0.0, 50.0, 101)
        h = 1e-6
        central = (cauchy_cost(s + 2 * h) - cauchy_cost(s)) / (2 * h)
        assert np.allclose(cauchy_weight(s + h), central, rtol=1e-6)
        assert np.allclose(cauchy_weight(s, c=2.0), 1.0 / (1.0 + s / 4.0))

    def test_edge_kinds(self):
        assert RelEdge(0, 1, IDENTITY, kind=SEQUENTIAL).kind == SEQUENTIAL
