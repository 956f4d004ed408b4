"""Incremental replay of a pose-graph dataset, one optimisation per loop edge."""

import bisect
import csv
import io
import time
from dataclasses import dataclass, field, fields

import numpy as np

from .baseline import GlobalState, baseline_optimize
from .dataset import corrupt_loops
from .factors import SEQUENTIAL
from .geometry import compose, inverse
from .graph import PoseGraph
from .lm import SolverConfig
from .optimizer import METHODS, add_loop_with_gate, optimize_all_states, optimize_loop

BASELINE = "baseline"
ALL_METHODS = (BASELINE,) + METHODS
STATS_COLUMNS = ("event", "i", "j", "method", "wall_s", "num_vars", "iters", "cost0", "cost1", "accepted")


class ReplayError(ValueError):
    pass


@dataclass
class EventRecord:
    event: int
    i: int
    j: int
    method: str
    wall_s: float
    num_vars: int
    iters: int
    cost0: float
    cost1: float
    accepted: bool


@dataclass
class ReplayStats:
    method: str
    events: list = field(default_factory=list)
    total_time: float = 0.0
    tree_height: int = 0
    node_count: int = 0
    final_cost: float = 0.0
    rejected: list = field(default_factory=list)  # dataset edge indices
    edge_index: list = field(default_factory=list)  # dataset edge index per event
    probes: dict = field(default_factory=dict)  # method -> list of EventRecord
    pruned: list = field(default_factory=list)  # keys removed by random pruning

    def column(self, name):
        return np.array([getattr(e, name) for e in self.events])


@dataclass
class ReplayResult:
    stats: ReplayStats
    keys: list
    poses: list
    state: object = None


def replay_schedule(dataset):
    """Dataset edge indices in replay order, after checking the odometry chain.

    Edges are ordered by their newer endpoint; sequential edges come before
    loops that close at the same vertex, ties keep file order.
    """
    ids = dataset.ids
    if not ids:
        return []
    if ids != list(range(ids[0], ids[0] + len(ids))):
        raise ReplayError("vertex ids must be consecutive")
    have = set()
    for e in dataset.edges:
        if e.kind == SEQUENTIAL:
            have.add(min(e.i, e.j))
    missing = [k for k in ids[:-1] if k not in have]
    if missing:
        raise ReplayError(f"odometry chain is disconnected after vertex {missing[0]}")
    return sorted(
        range(len(dataset.edges)),
        key=lambda k: (max(dataset.edges[k].i, dataset.edges[k].j),
                       dataset.edges[k].kind != SEQUENTIAL, k),
    )


def _odometry(edge, new_key):
    return edge.meas if edge.j == new_key else inverse(edge.meas)


def _record(event, edge, method, wall, res, num_vars, accepted):
    return EventRecord(event, edge.i, edge.j, method, wall, num_vars, res.iterations,
                       res.cost_initial, res.cost_final, accepted)


def _global_from_graph(graph):
    state = GlobalState()
    keys = sorted(graph.slot)
    for k in keys:
        state.insert(k, graph.cached_pose(k))
    for e in graph.edges:
        state.add_edge(e)
    return state


def _probe(graph, edge, methods, config, event):
    """Time each method on the current state, then roll every change back."""
    tree = graph.tree
    out = {}
    for m in methods:
        if m == BASELINE:
            state = _global_from_graph(graph)
            t0 = time.perf_counter()
            res = baseline_optimize(state, config=config)
            wall = time.perf_counter() - t0
            out[m] = _record(event, edge, m, wall, res, len(state) - 1, True)
            continue
        snap = tree.snapshot_keys(tree.keys())
        cy, cp = graph.cache_yaw.copy(), graph.cache_pos.copy()
        t0 = time.perf_counter()
        res = optimize_loop(graph, edge, m, config)
        wall = time.perf_counter() - t0
        tree.restore_path(snap)
        graph.cache_yaw[:] = cy
        graph.cache_pos[:] = cp
        out[m] = _record(event, edge, m, wall, res, res.num_variables, True)
    return out


def _prune_candidates(dataset):
    """Vertices that no loop edge ever touches, excluding the first."""
    in_loops = {k for e in dataset.edges if e.kind != SEQUENTIAL for k in (e.i, e.j)}
    return [k for k in dataset.ids[1:] if k not in in_loops]


def replay(dataset, method="tree-top-down", config=None, gate=False,
           probe_methods=(), probe_every=0, probe_after=0, max_events=None,
           prune_prob=0.0, prune_seed=0):
    """Insert vertices in id order and optimise on every loop edge.

    ``probe_methods`` are additionally timed on every ``probe_every``-th
    event (from event ``probe_after`` on) starting from the same state,
    without affecting the replay.

    With ``prune_prob > 0`` (tree methods only) each loop event is followed,
    with that probability, by removing one random older keyframe that no
    loop references; its two odometry edges are merged into one.
    """
    if method not in ALL_METHODS:
        raise ValueError(f"unknown method {method!r}")
    if prune_prob and method == BASELINE:
        raise ValueError("pruning needs a tree-based method")
    prune_rng = np.random.default_rng(prune_seed)
    candidates = _prune_candidates(dataset) if prune_prob else []
    config = config or SolverConfig()
    order = replay_schedule(dataset)
    stats = ReplayStats(method, probes={m: [] for m in probe_methods})
    tree_based = method != BASELINE
    state = PoseGraph() if tree_based else GlobalState()
    if not dataset.vertices:
        return ReplayResult(stats, [], [], state)
    first_id, first_pose = dataset.vertices[0]
    state.insert(first_id, first_pose)
    newest = first_id
    event = 0
    t_start = time.perf_counter()
    for idx in order:
        e = dataset.edges[idx]
        hi = max(e.i, e.j)
        if hi > newest:
            if e.kind != SEQUENTIAL or hi != newest + 1:
                raise ReplayError(f"vertex {hi} has no odometry edge from {newest}")
            state.insert(hi, compose(state.global_pose(newest), _odometry(e, hi)))
            newest = hi
        if e.kind == SEQUENTIAL:
            state.add_edge(e)
            continue
        if max_events is not None and event >= max_events:
            state.add_edge(e)
            continue
        if probe_methods and probe_every and event >= probe_after and \
                (event - probe_after) % probe_every == 0:
            state.add_edge(e)
            for m, rec in _probe(state, e, probe_methods, config, event).items():
                stats.probes[m].append(rec)
            state.edges.pop()
        t0 = time.perf_counter()
        if tree_based:
            g = add_loop_with_gate(state, e, config, method, gate)
            res, accepted, nv = g.result, g.accepted, g.result.num_variables
        else:
            res, accepted = _baseline_event(state, e, config, gate)
            nv = len(state) - 1
        wall = time.perf_counter() - t0
        stats.events.append(_record(event, e, method, wall, res, nv, accepted))
        stats.edge_index.append(idx)
        if not accepted:
            stats.rejected.append(idx)
        event += 1
        if prune_prob and prune_rng.random() < prune_prob:
            _prune_one(state, candidates, newest, prune_rng, stats)
    stats.total_time = time.perf_counter() - t_start
    if tree_based:
        stats.tree_height = state.tree.height
    stats.node_count = len(state)
    stats.final_cost = state.total_chi2()
    keys, poses = state.trajectory()
    return ReplayResult(stats, keys, poses, state)


def _prune_one(graph, candidates, newest, rng, stats):
    # candidates is sorted; only keys strictly older than the newest are eligible
    n = bisect.bisect_left(candidates, newest)
    if n == 0:
        return
    key = candidates.pop(int(rng.integers(n)))
    graph.prune(key)
    stats.pruned.append(key)


def _baseline_event(state, edge, config, gate):
    snap = state.snapshot() if gate else None
    idx = state.add_edge(edge)
    res = baseline_optimize(state, config=config)
    if gate and float(state.edge_chi2(np.array([idx]))[0]) >= config.gamma:
        state.restore(snap)
        state.edges.pop()
        return res, False
    return res, True


def batch_optimize(graph, method="tree-all", config=None):
    """One-shot solve over everything registered in ``graph`` (a PoseGraph)."""
    config = config or SolverConfig()
    if method == "tree-all":
        return optimize_all_states(graph, config), graph
    if method == BASELINE:
        state = _global_from_graph(graph)
        return baseline_optimize(state, config=config), state
    raise ValueError(f"batch mode supports tree-all and baseline, not {method!r}")


@dataclass
class RobustnessReport:
    corrupted: list
    rejected_corrupt: int
    rejected_clean: int
    n_clean: int
    clean_cost_gated: float
    clean_cost_ungated: float
    gated: ReplayResult
    ungated: ReplayResult

    @property
    def tp_rate(self):
        return self.rejected_corrupt / len(self.corrupted) if self.corrupted else 0.0

    @property
    def fp_rate(self):
        return self.rejected_clean / self.n_clean if self.n_clean else 0.0


def clean_edge_cost(state, clean_edges):
    """Non-robust chi-square of ``clean_edges`` evaluated on a replay's final state."""
    probe = GlobalState()
    keys, poses = state.trajectory()
    for k, p in zip(keys, poses):
        probe.insert(k, p)
    for e in clean_edges:
        probe.add_edge(e)
    return probe.total_chi2()


def run_robustness(dataset, fraction=0.10, seed=0, gamma=None, method="tree-top-down", config=None):
    """Replay with corrupted loops, gate on and gate off, and score the gate."""
    config = config or SolverConfig()
    if gamma is not None:
        config = SolverConfig(**{**config.__dict__, "gamma": gamma})
    bad, corrupted = corrupt_loops(dataset, fraction, seed)
    gated = replay(bad, method, config, gate=True)
    ungated = replay(bad, method, config, gate=False)
    cset = set(corrupted)
    rejected = set(gated.stats.rejected)
    loops = bad.loop_indices()
    clean = [e for k, e in enumerate(bad.edges) if k not in cset]
    return RobustnessReport(
        corrupted=corrupted,
        rejected_corrupt=len(rejected & cset),
        rejected_clean=len(rejected - cset),
        n_clean=len(loops) - len(cset),
        clean_cost_gated=clean_edge_cost(gated.state, clean),
        clean_cost_ungated=clean_edge_cost(ungated.state, clean),
        gated=gated,
        ungated=ungated,
    )


def emit_stats(stats, stream=None):
    """Write one CSV row per event; returns the text when no stream is given."""
    out = stream if stream is not None else io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(STATS_COLUMNS)
    events = stats.events if isinstance(stats, ReplayStats) else stats
    for r in events:
        w.writerow([r.event, r.i, r.j, r.method, repr(r.wall_s), r.num_vars, r.iters,
                    repr(r.cost0), repr(r.cost1), int(r.accepted)])
    return out.getvalue() if stream is None else None


def read_stats(stream):
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    conv = {f.name: f.type for f in fields(EventRecord)}
    out = []
    for row in csv.DictReader(stream):
        vals = {}
        for k, v in row.items():
            t = conv[k]
            if t is bool or t == "bool":
                vals[k] = bool(int(v))
            elif t in (int, "int"):
                vals[k] = int(v)
            elif t in (float, "float"):
                vals[k] = float(v)
            else:
                vals[k] = v
        out.append(EventRecord(**vals))
    return out
