import math

import numpy as np
import pytest
from scipy.optimize import minimize

from memtree.baseline import GlobalState, baseline_optimize, baseline_residual
from memtree.factors import SEQUENTIAL, RelEdge, cauchy_cost, mahalanobis_sq, residual_from_poses
from memtree.geometry import IDENTITY, Pose4
from memtree.lm import SolverConfig
from memtree.optimizer import optimize_all_states

from conftest import chain_graph

TIGHT = SolverConfig(max_iters=200, ftol=1e-14, gtol=1e-12)


def state_from_graph(graph):
    s = GlobalState()
    for k in sorted(graph.slot):
        s.insert(k, graph.global_pose(k))
    for e in graph.edges:
        s.add_edge(e)
    return s


def flat_cost(poses, edges):
    """Robust cost from a plain dict of global poses."""
    return sum(cauchy_cost(mahalanobis_sq(residual_from_poses(poses[e.i], poses[e.j], e.meas), e.cov))
               for e in edges)


class TestResidual:
    def test_examples(self):
        s = GlobalState()
        s.insert(0, IDENTITY)
        s.insert(1, Pose4(0.0, (1, 0, 0)))
        assert np.allclose(baseline_residual(s, RelEdge(0, 1, Pose4(0.0, (1, 0, 0)))), 0)
        r = baseline_residual(s, RelEdge(0, 1, Pose4(0.1, (1, 0, 0))))
        assert np.allclose(r, (0.1, 0, 0, 0), atol=1e-15)

    def test_missing_vertex(self):
        s = GlobalState()
        s.insert(0, IDENTITY)
        with pytest.raises(KeyError):
            baseline_residual(s, RelEdge(0, 5, IDENTITY))
        with pytest.raises(KeyError):
            s.add_edge(RelEdge(0, 5, IDENTITY))
        with pytest.raises(ValueError):
            s.insert(0, IDENTITY)


class TestOptimize:
    def test_consistent_graph(self, rng):
        g, _, _ = chain_graph(rng, 25, 5, sy=0.0, sx=0.0)
        s = state_from_graph(g)
        before = (s.yaw.copy(), s.pos.copy())
        res = baseline_optimize(s)
        assert res.cost_final < 1e-20
        assert np.allclose(s.yaw, before[0], atol=1e-12) and np.allclose(s.pos, before[1], atol=1e-12)

    def test_triangle(self):
        s = GlobalState()
        s.insert(0, IDENTITY)
        s.insert(1, Pose4(0.0, (1, 0, 0)))
        s.insert(2, Pose4(math.pi / 2, (1, 1, 0)))
        edges = [
            RelEdge(0, 1, Pose4(0.0, (1, 0, 0)), kind=SEQUENTIAL),
            RelEdge(1, 2, Pose4(math.pi / 2, (0, 1, 0)), kind=SEQUENTIAL),
            RelEdge(2, 0, Pose4(-math.pi / 2 + 0.02, (-1.05, 1.03, 0.01))),
        ]
        for e in edges:
            s.add_edge(e)
        res = baseline_optimize(s, config=TIGHT)
        assert res.cost_final < res.cost_initial and res.converged

        def objective(x):
            poses = {0: IDENTITY, 1: Pose4(x[0], x[1:4]), 2: Pose4(x[4], x[5:8])}
            return flat_cost(poses, edges)

        x = np.concatenate([[s.yaw[1]], s.pos[1], [s.yaw[2]], s.pos[2]])
        h = 1e-6
        grad = np.array([(objective(x + h * d) - objective(x - h * d)) / (2 * h) for d in np.eye(8)])
        assert np.abs(grad).max() < 1e-8
        x0 = np.array([0, 1, 0, 0, math.pi / 2, 1, 1, 0], float)
        ref = minimize(objective, x0, method="BFGS", options={"gtol": 1e-12})
        assert res.cost_final == pytest.approx(ref.fun, abs=1e-8)

    def test_gauge_bit_unchanged(self, rng):
        g, _, _ = chain_graph(rng, 40, 8)
        s = state_from_graph(g)
        y0, p0 = s.yaw[0], s.pos[0].copy()
        res = baseline_optimize(s)
        assert res.num_variables == len(s) - 1
        assert s.yaw[0] == y0 and np.array_equal(s.pos[0], p0)

    def test_monotone(self, rng):
        g, _, _ = chain_graph(rng, 60, 15, sy=0.1, sx=0.3)
        s = state_from_graph(g)
        res = baseline_optimize(s)
        assert res.cost_final <= res.cost_initial
        assert all(d > 0 for d in res.decreases)

    def test_explicit_edge_list(self, rng):
        g, edges, _ = chain_graph(rng, 12, 3)
        s = GlobalState()
        for k in sorted(g.slot):
            s.insert(k, g.global_pose(k))
        res = baseline_optimize(s, edges=edges)
        assert res.cost_final <= res.cost_initial
        assert len(s.edges) == 0
        with pytest.raises(KeyError):
            baseline_optimize(s, edges=[RelEdge(0, 99, IDENTITY)])

    def test_snapshot_restore(self, rng):
        g, _, _ = chain_graph(rng, 20, 4)
        s = state_from_graph(g)
        snap = s.snapshot()
        before = (s.yaw.copy(), s.pos.copy())
        baseline_optimize(s)
        s.restore(snap)
        assert np.array_equal(s.yaw, before[0]) and np.array_equal(s.pos, before[1])


class TestEquivalence:
    def test_matches_tree_all_states(self):
        rng = np.random.default_rng(3)
        for trial in range(10):
            n = int(rng.integers(3, 13))
            g, _, _ = chain_graph(rng, n, int(rng.integers(1, 5)), sy=0.05, sx=0.2)
            s = state_from_graph(g)
            tree = optimize_all_states(g, TIGHT)
            base = baseline_optimize(s, config=TIGHT)
            assert abs(tree.cost_final - base.cost_final) <= 1e-6, trial
