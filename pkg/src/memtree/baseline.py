"""Conventional pose-graph LM with every pose in the global frame.

The first inserted vertex is the gauge and never moves; every other vertex
is a free 4-DoF variable, so a solve always has N - 1 variables.
"""

import numpy as np
import scipy.sparse as sp

from .factors import (
    cauchy_cost,
    cauchy_weight,
    chi2_terms,
    global_jacobians,
    residual_from_poses,
    residuals_global,
)
from .geometry import _make, wrap_yaw_array
from .graph import EdgeStore, _Growable
from .lm import (
    OptResult,
    SolverConfig,
    global_normal_equations,
    levenberg_marquardt,
    sparse_solve,
)


class GlobalState:
    """Global poses keyed by vertex id, plus the registered edges."""

    def __init__(self):
        self.keys = []
        self.slot = {}
        self._yaw = _Growable()
        self._pos = _Growable((3,))
        self.edges = EdgeStore()

    def __len__(self):
        return len(self.keys)

    def __contains__(self, key):
        return key in self.slot

    @property
    def yaw(self):
        return self._yaw.view

    @property
    def pos(self):
        return self._pos.view

    def insert(self, key, pose):
        if key in self.slot:
            raise ValueError(f"duplicate key {key!r}")
        self.slot[key] = len(self.keys)
        self.keys.append(key)
        self._yaw.append(pose[0])
        self._pos.append(pose[1:])

    def global_pose(self, key):
        try:
            s = self.slot[key]
        except KeyError:
            raise KeyError(f"key {key!r} not in state") from None
        p = self._pos.view[s]
        return _make(float(self._yaw.view[s]), float(p[0]), float(p[1]), float(p[2]))

    def add_edge(self, edge):
        for k in (edge.i, edge.j):
            if k not in self.slot:
                raise KeyError(f"edge references unknown key {k!r}")
        return self.edges.append(edge, self.slot[edge.i], self.slot[edge.j])

    def snapshot(self):
        return self._yaw.view.copy(), self._pos.view.copy()

    def restore(self, snap):
        self._yaw.view[:] = snap[0]
        self._pos.view[:] = snap[1]

    def edge_chi2(self, idx=None):
        st = self.edges
        si, sj, meas, info = st.si, st.sj, st.meas, st.info
        if idx is not None:
            si, sj, meas, info = si[idx], sj[idx], meas[idx], info[idx]
        y, p = self.yaw, self.pos
        r, _ = residuals_global(y[si], p[si], y[sj], p[sj], meas)
        return chi2_terms(r, info)

    def total_chi2(self, mask=None):
        if len(self.edges) == 0:
            return 0.0
        c = self.edge_chi2()
        return float(np.sum(c if mask is None else c[mask]))

    def trajectory(self):
        keys = sorted(self.keys)
        return keys, [self.global_pose(k) for k in keys]


def baseline_residual(state, edge):
    return residual_from_poses(state.global_pose(edge.i), state.global_pose(edge.j), edge.meas)


class BaselineProblem:
    """State ``x`` is ``(yaw (N,), pos (N, 3))``; slot 0 is held fixed."""

    def __init__(self, state, store, config):
        self.state, self.config = state, config
        self.num_variables = len(state) - 1
        self.si, self.sj = store.si.copy(), store.sj.copy()
        self.meas, self.info = store.meas.copy(), store.info.copy()
        self.va, self.vb = self.si - 1, self.sj - 1

    def initial(self):
        return self.state.yaw.copy(), self.state.pos.copy()

    def _residuals(self, x):
        y, p = x
        return residuals_global(y[self.si], p[self.si], y[self.sj], p[self.sj], self.meas)

    def cost(self, x):
        r, _ = self._residuals(x)
        return float(np.sum(cauchy_cost(chi2_terms(r, self.info), self.config.cauchy_c)))

    def linearize(self, x):
        r, rel_t = self._residuals(x)
        w = cauchy_weight(chi2_terms(r, self.info), self.config.cauchy_c)[:, None] * self.info
        ju, jv = global_jacobians(x[0][self.si], rel_t)
        h, g = global_normal_equations(ju, jv, w, r, self.va, self.vb, self.num_variables)
        return (h, g), float(np.max(np.abs(g))) if g.size else 0.0

    def solve(self, system, lam):
        h, g = system
        return sparse_solve(h + lam * sp.identity(h.shape[0], format="csc"), -g)

    def retract(self, x, dx):
        d = dx.reshape(-1, 4)
        y, p = x[0].copy(), x[1].copy()
        y[1:] = wrap_yaw_array(y[1:] + d[:, 0])
        p[1:] += d[:, 1:]
        return y, p

    def commit(self, x):
        self.state.yaw[1:] = x[0][1:]
        self.state.pos[1:] = x[1][1:]


def baseline_optimize(state, edges=None, config=None):
    """Optimise every vertex except the first over ``edges`` (default: registered ones)."""
    config = config or SolverConfig()
    store = state.edges
    if edges is not None:
        store = EdgeStore()
        for e in edges:
            for k in (e.i, e.j):
                if k not in state.slot:
                    raise KeyError(f"edge references unknown key {k!r}")
            store.append(e, state.slot[e.i], state.slot[e.j])
    if len(state) < 2:
        return OptResult(converged=True)
    return levenberg_marquardt(BaselineProblem(state, store, config), config)
