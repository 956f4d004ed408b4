import math

import numpy as np
import pytest

from memtree.bench import (
    STATS_COLUMNS,
    ReplayError,
    ReplayStats,
    batch_optimize,
    emit_stats,
    read_stats,
    replay,
    replay_schedule,
    run_robustness,
)
from memtree.cli import main
from memtree.dataset import Dataset, apply_sigma_mode, corrupt_loops, read_trajectory
from memtree.factors import SEQUENTIAL, RelEdge
from memtree.geometry import IDENTITY, Pose4, compose, relative
from memtree.graph import PoseGraph
from memtree.synthetic import manhattan

from conftest import pose_close


def avl_bound(n):
    return 1.4405 * math.log2(n + 2)


@pytest.fixture(scope="module")
def small():
    d, _ = manhattan(n=400, seed=4)
    return apply_sigma_mode(d)


def chain_dataset(n, step=Pose4(0.1, (1.0, 0.0, 0.0))):
    verts, edges = [(0, IDENTITY)], []
    for k in range(1, n):
        verts.append((k, compose(verts[-1][1], step)))
        edges.append(RelEdge(k - 1, k, step, kind=SEQUENTIAL))
    return Dataset(verts, edges, "chain")


class TestReplay:
    def test_no_loops(self):
        d = chain_dataset(30)
        for method in ("tree-top-down", "baseline"):
            r = replay(d, method)
            assert r.stats.events == []
            for (k, p), q in zip(d.vertices, r.poses):
                assert pose_close(p, q, 1e-9)

    def test_consistent_triangle(self):
        d = chain_dataset(3)
        g = dict(d.vertices)
        d.edges.append(RelEdge(2, 0, relative(g[2], g[0])))
        for method in ("tree-top-down", "tree-full-path", "tree-all", "baseline"):
            r = replay(d, method)
            (ev,) = r.stats.events
            assert ev.cost1 < 1e-20 and ev.accepted
            for (k, p), q in zip(d.vertices, r.poses):
                assert pose_close(p, q, 1e-9)

    def test_disconnected_chain(self):
        d = chain_dataset(6)
        del d.edges[2]
        with pytest.raises(ReplayError):
            replay(d)
        d = chain_dataset(4)
        d.vertices.append((7, IDENTITY))
        with pytest.raises(ReplayError):
            replay_schedule(d)

    def test_unknown_method(self, small):
        with pytest.raises(ValueError):
            replay(small, "simplex")

    def test_schedule_order(self, small):
        order = replay_schedule(small)
        his = [max(small.edges[k].i, small.edges[k].j) for k in order]
        assert his == sorted(his)
        assert sorted(order) == list(range(len(small.edges)))

    def test_variable_count_laws(self, small):
        td = replay(small, "tree-top-down")
        fp = replay(small, "tree-full-path")
        bl = replay(small, "baseline", max_events=40)
        n_loops = len(small.loop_indices())
        assert len(td.stats.events) == len(fp.stats.events) == n_loops
        for a, b in zip(td.stats.events, fp.stats.events):
            assert (a.i, a.j) == (b.i, b.j)
            n = max(a.i, a.j) + 1
            assert b.num_vars <= 2 * avl_bound(n)
            assert a.num_vars <= b.num_vars
            assert a.cost1 <= a.cost0 and b.cost1 <= b.cost0
        for ev in bl.stats.events:
            assert ev.num_vars == max(ev.i, ev.j)  # N_current - 1 with ids from 0
            assert ev.cost1 <= ev.cost0
        assert td.stats.final_cost < 0.1 * odometry_chi2(small)
        assert np.median(td.stats.column("num_vars")) <= 5

    def test_determinism(self, small):
        a = replay(small, "tree-top-down", max_events=60)
        b = replay(small, "tree-top-down", max_events=60)
        strip = lambda s: [r.split(",")[:4] + r.split(",")[5:] for r in emit_stats(s.stats).splitlines()]
        assert strip(a) == strip(b)

    def test_gate_and_probes(self, small):
        r = replay(small, "tree-top-down", gate=True, probe_methods=("tree-full-path", "baseline"),
                   probe_every=25, max_events=100)
        ref = replay(small, "tree-top-down", gate=True, max_events=100)
        # probing leaves the replay untouched
        assert [e.cost1 for e in r.stats.events] == [e.cost1 for e in ref.stats.events]
        n_events = min(100, len(small.loop_indices()))
        assert len(r.stats.probes["baseline"]) == math.ceil(n_events / 25)
        assert all(p.num_vars == max(p.i, p.j) for p in r.stats.probes["baseline"])

    def test_gate_off_never_rejects(self, small):
        bad, _ = corrupt_loops(small, 0.3, seed=2)
        assert replay(bad, "tree-full-path").stats.rejected == []


class TestPrune:
    def test_graph_prune_merges_odometry(self):
        d = chain_dataset(12)
        g = PoseGraph()
        for k, p in d.vertices:
            g.insert(k, p)
        for e in d.edges:
            g.add_edge(e)
        before = {k: g.global_pose(k) for k in g.tree.keys()}
        merged = g.prune(5)
        assert (merged.i, merged.j, merged.kind) == (4, 6, SEQUENTIAL)
        assert pose_close(merged.meas, relative(before[4], before[6]), 1e-12)
        assert merged.cov == pytest.approx(tuple(2 * c for c in d.edges[0].cov))
        assert 5 not in g.tree and len(g.edges) == 10
        g.tree.check_invariants()
        for k in g.tree.keys():
            assert pose_close(g.global_pose(k), before[k], 1e-9)
        assert g.total_chi2() < 1e-20
        with pytest.raises(ValueError):
            g.prune(0)  # one odometry edge only

    def test_prune_refuses_loop_nodes(self):
        d = chain_dataset(8)
        g = PoseGraph()
        for k, p in d.vertices:
            g.insert(k, p)
        for e in d.edges:
            g.add_edge(e)
        g.add_edge(RelEdge(6, 3, IDENTITY))
        with pytest.raises(ValueError):
            g.prune(3)

    def test_replay_with_pruning(self, small):
        r = replay(small, "tree-top-down", prune_prob=0.5, prune_seed=3)
        st = r.stats
        assert len(st.pruned) > 20
        assert st.node_count == len(small.vertices) - len(st.pruned)
        r.state.tree.check_invariants()
        for k in r.state.tree.keys():
            assert pose_close(r.state.cached_pose(k), r.state.global_pose(k), 1e-9)
        loops = {k for e in small.edges if e.kind != SEQUENTIAL for k in (e.i, e.j)}
        assert not loops & set(st.pruned)
        with pytest.raises(ValueError):
            replay(small, "baseline", prune_prob=0.5)


def odometry_chi2(data):
    g = PoseGraph()
    for k, p in data.vertices:
        g.insert(k, p)
    for e in data.edges:
        g.add_edge(e)
    return g.total_chi2()


class TestBatchAndRobustness:
    def test_batch(self, small):
        for method in ("tree-all", "baseline"):
            g = PoseGraph()
            for k, p in small.vertices:
                g.insert(k, p)
            for e in small.edges:
                g.add_edge(e)
            res, state = batch_optimize(g, method)
            assert res.cost_final < res.cost_initial
            assert state.total_chi2() < odometry_chi2(small)
        with pytest.raises(ValueError):
            batch_optimize(g, "tree-top-down")

    def test_robustness_zero_fraction(self, small):
        rep = run_robustness(small, 0.0, seed=0)
        assert rep.corrupted == [] and rep.rejected_corrupt == 0
        assert rep.ungated.stats.rejected == []
        assert rep.fp_rate == rep.rejected_clean / rep.n_clean

    def test_robustness_small(self, small):
        rep = run_robustness(small, 0.1, seed=1)
        assert rep.tp_rate > 0.5
        assert rep.clean_cost_gated < rep.clean_cost_ungated


class TestStatsCsv:
    def test_header_only(self):
        assert emit_stats(ReplayStats("x")) == ",".join(STATS_COLUMNS) + "\n"

    def test_round_trip(self, small):
        st = replay(small, "tree-full-path", max_events=1).stats
        text = emit_stats(st)
        assert len(text.splitlines()) == 2
        st = replay(small, "tree-top-down", max_events=30).stats
        back = read_stats(emit_stats(st))
        assert back == st.events


class TestCli:
    def test_replay_outputs(self, tmp_path, capsys):
        traj, stats, figs = tmp_path / "t.csv", tmp_path / "s.csv", tmp_path / "figs"
        code = main(["--synthetic", "manhattan", "--size", "300", "--method", "tree-top-down",
                     "--export-traj", str(traj), "--export-stats", str(stats),
                     "--figures", str(figs), "--prune-prob", "0.2"])
        assert code == 0
        out = capsys.readouterr().out
        assert "events" in out and "pruned" in out
        keys, _ = read_trajectory(traj.read_text())
        assert len(keys) > 200
        assert stats.read_text().splitlines()[0] == ",".join(STATS_COLUMNS)
        assert {p.name for p in figs.iterdir()} == {"trajectory.png", "num_vars.png", "wall_time.png"}
        assert all(p.stat().st_size > 1000 for p in figs.iterdir())

    def test_dataset_batch_and_robustness(self, tmp_path, small):
        from memtree.dataset import write_g2o
        path = tmp_path / "g.g2o"
        with open(path, "w") as f:
            write_g2o(small, f)
        assert main(["--dataset", str(path), "--mode", "batch", "--method", "baseline",
                     "--export-traj", str(tmp_path / "b.csv"), "--figures", str(tmp_path)]) == 0
        assert (tmp_path / "batch_trajectory.png").exists()
        assert main(["--dataset", str(path), "--mode", "robustness", "--seed", "3",
                     "--write-g2o", str(tmp_path / "bad.g2o"), "--figures", str(tmp_path)]) == 0
        assert (tmp_path / "robustness_rejections.png").exists()
        assert (tmp_path / "bad.g2o").read_text() != path.read_text()

    def test_errors(self, tmp_path, capsys):
        assert main(["--dataset", str(tmp_path / "missing.g2o")]) == 2
        assert "error:" in capsys.readouterr().err
        bad = tmp_path / "bad.g2o"
        bad.write_text("VERTEX_SE2 0 0 0\n")
        assert main(["--dataset", str(bad)]) == 2
        assert "line 1" in capsys.readouterr().err
        assert main(["--synthetic", "corridors", "--size", "100", "--mode", "batch",
                     "--method", "tree-top-down"]) == 2
        with pytest.raises(SystemExit):
            main(["--method", "tree-all"])
