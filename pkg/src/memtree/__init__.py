"""Memory-tree pose-graph optimisation with a global-frame baseline and replay harness."""

from .baseline import GlobalState, baseline_optimize, baseline_residual
from .bench import ReplayStats, emit_stats, replay, run_robustness
from .dataset import (
    Dataset,
    apply_sigma_mode,
    classify_edges,
    corrupt_loops,
    export_trajectory,
    parse_g2o_2d,
)
from .factors import CHI2_4DOF_95, DEFAULT_COVARIANCE, LOOP, SEQUENTIAL, RelEdge
from .geometry import IDENTITY, Pose4, compose, inverse, relative, wrap_yaw
from .graph import PoseGraph
from .lm import OptResult, SolverConfig, SolverError
from .optimizer import (
    VariableSelection,
    add_loop_with_gate,
    optimize_all_states,
    optimize_full_path,
    optimize_lm,
    optimize_top_down,
    select_all_states,
    select_full_path,
    select_top_down,
    select_variables,
)
from .tree import MemoryTree, PathSnapshot, TopologyChangedError

__version__ = "0.1.0"
