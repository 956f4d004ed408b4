"""Command-line harness: incremental replay, batch solve and bad-loop robustness."""

import argparse
import logging
import os
import sys

import numpy as np

from .bench import (
    ALL_METHODS,
    BASELINE,
    batch_optimize,
    emit_stats,
    replay,
    run_robustness,
)
from .dataset import (
    SIGMA_DATASET,
    SIGMA_TUNED,
    apply_sigma_mode,
    corrupt_loops,
    export_trajectory,
    load_g2o,
    write_g2o,
)
from .factors import DEFAULT_COVARIANCE
from .graph import PoseGraph
from .lm import SolverConfig
from .optimizer import TOPDOWN_RULES
from .synthetic import SURROGATES

log = logging.getLogger("memtree")


def build_parser():
    p = argparse.ArgumentParser(
        prog="memtree-bench",
        description="Replay 2D pose graphs through the memory tree and a global-frame baseline.",
    )
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--dataset", metavar="PATH", help="g2o file with VERTEX_SE2/EDGE_SE2 records")
    src.add_argument("--synthetic", choices=sorted(SURROGATES), help="generate a seeded surrogate graph")
    p.add_argument("--size", type=int, default=None, help="number of poses for --synthetic")
    p.add_argument("--mode", choices=("replay", "batch", "robustness"), default="replay")
    p.add_argument("--method", choices=ALL_METHODS, default="tree-top-down")
    p.add_argument("--gate", choices=("on", "off"), default="off")
    p.add_argument("--gamma", type=float, default=SolverConfig.gamma)
    p.add_argument("--corrupt-fraction", type=float, default=None,
                   help="fraction of loops to corrupt (robustness mode defaults to 0.10)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma-mode", choices=(SIGMA_TUNED, SIGMA_DATASET), default=SIGMA_TUNED)
    p.add_argument("--sigma", type=float, nargs=4, metavar=("YAW", "X", "Y", "Z"),
                   default=DEFAULT_COVARIANCE, help="tuned covariance diagonal")
    p.add_argument("--max-lm-iters", type=int, default=SolverConfig.max_iters)
    p.add_argument("--topdown-rule", choices=TOPDOWN_RULES, default=SolverConfig.topdown_rule)
    p.add_argument("--prune-prob", type=float, default=0.0,
                   help="replay: chance per loop event of removing a random unlooped keyframe")
    p.add_argument("--export-traj", metavar="PATH")
    p.add_argument("--export-stats", metavar="PATH")
    p.add_argument("--figures", metavar="DIR", help="write PNG figures into this directory")
    p.add_argument("--write-g2o", metavar="PATH", help="save the (possibly corrupted) input graph")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _load(args):
    sigma = tuple(args.sigma)
    if args.dataset:
        return load_g2o(args.dataset, args.sigma_mode, sigma)
    kw = {"seed": args.seed}
    if args.size is not None:
        kw["n"] = args.size
    data, _ = SURROGATES[args.synthetic](**kw)
    return apply_sigma_mode(data, args.sigma_mode, sigma)


def _odometry_graph(data):
    g = PoseGraph()
    for k, p in data.vertices:
        g.insert(k, p)
    for e in data.edges:
        g.add_edge(e)
    return g


def _write_traj(path, keys, poses):
    with open(path, "w", newline="") as f:
        export_trajectory(keys, poses, f)


def _write_stats(path, stats):
    with open(path, "w", newline="") as f:
        emit_stats(stats, f)


def run(args):
    config = SolverConfig(
        max_iters=args.max_lm_iters,
        gamma=args.gamma,
        sigma=tuple(args.sigma),
        topdown_rule=args.topdown_rule,
    )
    data = _load(args)
    fig_dir = args.figures
    if fig_dir:
        os.makedirs(fig_dir, exist_ok=True)
        from . import plotting
    name = os.path.basename(data.name) or "graph"
    odom = _odometry_graph(data)
    print(f"{name}: {len(data.vertices)} vertices, {len(data.edges)} edges, "
          f"{len(data.loop_indices())} loops; odometry chi2 {odom.total_chi2():.6g}")

    if args.mode == "robustness":
        fraction = 0.10 if args.corrupt_fraction is None else args.corrupt_fraction
        method = args.method if args.method != BASELINE else "tree-top-down"
        rep = run_robustness(data, fraction, args.seed, None, method, config)
        print(f"corrupted {len(rep.corrupted)}: rejected {rep.rejected_corrupt} "
              f"(rate {rep.tp_rate:.3f}); clean rejected {rep.rejected_clean}/{rep.n_clean} "
              f"(rate {rep.fp_rate:.3f})")
        print(f"clean-edge chi2 gated {rep.clean_cost_gated:.6g} ungated {rep.clean_cost_ungated:.6g}")
        if args.export_stats:
            _write_stats(args.export_stats, rep.gated.stats)
        if args.export_traj:
            _write_traj(args.export_traj, rep.gated.keys, rep.gated.poses)
        if args.write_g2o:
            bad, _ = corrupt_loops(data, fraction, args.seed)
            with open(args.write_g2o, "w") as f:
                write_g2o(bad, f)
        if fig_dir:
            plotting.plot_trajectories(
                {"gate on": (rep.gated.keys, rep.gated.poses),
                 "gate off": (rep.ungated.keys, rep.ungated.poses)},
                os.path.join(fig_dir, "robustness_trajectories.png"), name)
            plotting.plot_rejections(rep.gated.stats, rep.corrupted,
                                     os.path.join(fig_dir, "robustness_rejections.png"))
        return 0

    if args.corrupt_fraction:
        data, corrupted = corrupt_loops(data, args.corrupt_fraction, args.seed)
        print(f"corrupted {len(corrupted)} loop edges (seed {args.seed})")
    if args.write_g2o:
        with open(args.write_g2o, "w") as f:
            write_g2o(data, f)

    if args.mode == "batch":
        if args.method not in ("tree-all", BASELINE):
            raise ValueError("batch mode supports --method tree-all or baseline")
        res, state = batch_optimize(_odometry_graph(data), args.method, config)
        keys, poses = state.trajectory()
        print(f"batch {args.method}: {res.iterations} iterations, robust cost "
              f"{res.cost_initial:.6g} -> {res.cost_final:.6g}, chi2 {state.total_chi2():.6g}")
        if args.export_traj:
            _write_traj(args.export_traj, keys, poses)
        if fig_dir:
            okeys, oposes = odom.trajectory()
            plotting.plot_trajectories(
                {"odometry": (okeys, oposes), args.method: (keys, poses)},
                os.path.join(fig_dir, "batch_trajectory.png"), name)
        return 0

    if not 0.0 <= args.prune_prob <= 1.0:
        raise ValueError("--prune-prob must be in [0, 1]")
    result = replay(data, args.method, config, gate=args.gate == "on",
                    prune_prob=args.prune_prob, prune_seed=args.seed)
    st = result.stats
    nv = st.column("num_vars") if st.events else np.zeros(0)
    wall = st.column("wall_s") if st.events else np.zeros(0)
    print(f"{args.method}: {len(st.events)} events, {len(st.rejected)} rejected, "
          f"total {st.total_time:.3f} s")
    if st.events:
        print(f"  median wall {np.median(wall):.6f} s, median vars {np.median(nv):g}, "
              f"max vars {nv.max()}")
    print(f"  final chi2 {st.final_cost:.6g}, nodes {st.node_count}, tree height {st.tree_height}")
    if st.pruned:
        print(f"  pruned {len(st.pruned)} keyframes")
    if args.export_stats:
        _write_stats(args.export_stats, st)
    if args.export_traj:
        _write_traj(args.export_traj, result.keys, result.poses)
    if fig_dir:
        okeys, oposes = odom.trajectory()
        plotting.plot_trajectories(
            {"odometry": (okeys, oposes), args.method: (result.keys, result.poses)},
            os.path.join(fig_dir, "trajectory.png"), name)
        if st.events:
            plotting.plot_event_series({args.method: st}, "num_vars",
                                       os.path.join(fig_dir, "num_vars.png"), "variables")
            plotting.plot_event_series({args.method: st}, "wall_s",
                                       os.path.join(fig_dir, "wall_time.png"), "wall time [s]",
                                       log=True)
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
