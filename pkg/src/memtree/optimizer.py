"""Variable selection and Levenberg-Marquardt over memory-tree relative poses.

A solve frees the relative poses of a chosen set of tree nodes. Moving one
node rigidly moves its whole subtree, so an edge ``(u, v)`` depends on a
variable ``n`` exactly when one endpoint lies in ``n``'s subtree and the
other does not. Subtrees of a BST are contiguous key ranges, which makes
that test a pair of vectorised comparisons.
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy.sparse import linalg as spla

from .factors import (
    cauchy_cost,
    cauchy_weight,
    chi2_terms,
    compose_arrays,
    global_jacobians,
    mahalanobis_sq,
    residual_from_poses,
    residuals_global,
)
from .geometry import IDENTITY, _make, compose, inverse, wrap_yaw_array
from .lm import (
    OptResult,
    SolverConfig,
    assemble_blocks,
    SolverError,
    dense_solve,
    global_normal_equations,
    levenberg_marquardt,
    sparse_solve,
)

METHODS = ("tree-all", "tree-full-path", "tree-top-down")


@dataclass
class VariableSelection:
    """Free nodes (ordered root-to-leaf) and the edges that depend on them."""

    keys: list
    depths: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    edge_idx: np.ndarray
    all_states: bool = False

    def __len__(self):
        return len(self.keys)

    @property
    def variable_set(self):
        return set(self.keys)


def _range_masks(sel, k):
    k = np.asarray(k)
    return (k[None, :] >= sel.lo[:, None]) & (k[None, :] <= sel.hi[:, None])


def select_variables(graph, keys, all_states=False):
    tree = graph.tree
    root = graph.root_key
    keys = list(dict.fromkeys(keys))
    if root in keys:
        raise ValueError("the root node is always fixed")
    depths = [tree.depth(k) for k in keys]
    order = sorted(range(len(keys)), key=lambda i: (depths[i], keys[i]))
    keys = [keys[i] for i in order]
    depths = np.array([depths[i] for i in order], dtype=np.int64)
    ranges = [tree.subtree_range(k) for k in keys]
    lo = np.array([r[0] for r in ranges], dtype=np.int64)
    hi = np.array([r[1] for r in ranges], dtype=np.int64)
    sel = VariableSelection(keys, depths, lo, hi, np.zeros(0, dtype=np.int64), all_states)
    n_edges = len(graph.edges)
    if all_states:
        sel.edge_idx = np.arange(n_edges)
    elif keys and n_edges:
        ki, kj = graph.edges.ki, graph.edges.kj
        mask = np.zeros(n_edges, dtype=bool)
        for a, b in zip(lo, hi):
            mask |= ((ki >= a) & (ki <= b)) ^ ((kj >= a) & (kj <= b))
        sel.edge_idx = np.nonzero(mask)[0]
    return sel


def select_all_states(graph):
    root = graph.root_key
    return select_variables(graph, [k for k in graph.tree.keys() if k != root], all_states=True)


def select_full_path(graph, loop):
    """Every node on the tree path between the loop endpoints, minus the root."""
    root = graph.root_key
    return select_variables(graph, [k for k in graph.tree.path(loop.i, loop.j) if k != root])


def select_top_down(graph, loop):
    """Yield growing frontiers from the LCA down both sides of the loop path.

    Frontier 0 is the LCA (unless it is the root) and its on-path children;
    each later frontier adds the next node down on each side.
    """
    tree = graph.tree
    path = tree.path(loop.i, loop.j)
    top = tree.lca(loop.i, loop.j)
    p = path.index(top)
    side_a = path[:p][::-1]
    side_b = path[p + 1:]
    keys = [] if top == graph.root_key else [top]
    for depth in range(max(len(side_a), len(side_b))):
        for side in (side_a, side_b):
            if depth < len(side):
                keys.append(side[depth])
        yield select_variables(graph, keys)


class TreeProblem:
    """Robust least squares over the relative poses of selected tree nodes.

    State ``x`` is an ``(n, 4)`` array of relative ``(yaw, x, y, z)``. Two
    interchangeable linear-solve routes produce the same LM step:

    * ``dense``: Jacobian w.r.t. relative poses, dense Cholesky.
    * ``sparse`` (all states only): sparse global-frame normal equations with
      the damping term mapped through the relative/global change of
      variables, which is block-sparse because each relative pose only
      involves a node and its parent.
    """

    def __init__(self, graph, sel, config, route="dense"):
        if route == "sparse" and not sel.all_states:
            raise ValueError("the sparse route needs every non-root node free")
        tree = graph.tree
        self.graph, self.sel, self.config, self.route = graph, sel, config, route
        keys = sel.keys
        n = self.num_variables = len(keys)
        self.nodes = [tree.node(k) for k in keys]
        vidx = {k: i for i, k in enumerate(keys)}
        slot = graph.slot
        cy, cp = graph.cache_yaw, graph.cache_pos

        self.var_slot = np.array([slot[k] for k in keys], dtype=np.int64)
        par_slot = np.array([slot[nd.parent.key] for nd in self.nodes], dtype=np.int64)
        anc = np.full(n, -1, dtype=np.int64)
        for i, nd in enumerate(self.nodes):
            p = nd.parent
            while p is not None and p.key not in vidx:
                p = p.parent
            if p is not None:
                anc[i] = vidx[p.key]
        self.anc = anc
        self.levels = [np.nonzero(sel.depths == d)[0] for d in np.unique(sel.depths)]

        self.T0 = np.array([nd.rel for nd in self.nodes], dtype=float).reshape(n, 4)
        self.g0 = (cy[self.var_slot].copy(), cp[self.var_slot].copy())
        self.p0 = (cy[par_slot].copy(), cp[par_slot].copy())

        st = graph.edges
        idx = sel.edge_idx
        ku, kv = st.ki[idx], st.kj[idx]
        su, sv = st.si[idx], st.sj[idx]
        self.meas = st.meas[idx]
        self.info = st.info[idx]
        self.u0 = (cy[su].copy(), cp[su].copy())
        self.v0 = (cy[sv].copy(), cp[sv].copy())
        if route == "sparse":
            self.au = np.array([vidx.get(k, -1) for k in ku.tolist()], dtype=np.int64)
            self.av = np.array([vidx.get(k, -1) for k in kv.tolist()], dtype=np.int64)
        else:
            self.in_u = _range_masks(sel, ku)
            self.in_v = _range_masks(sel, kv)
            self.au = _deepest(self.in_u)
            self.av = _deepest(self.in_v)
            # +1 when only u moves with the variable, -1 when only v does
            self.sign = (self.in_u.astype(float) - self.in_v.astype(float)).T
            self._anc = self.anc.tolist()
            self._p0 = [_make(*r) for r in np.column_stack(self.p0).tolist()]
            self._g0inv = [inverse(_make(*r)) for r in np.column_stack(self.g0).tolist()]

    def initial(self):
        return self.T0.copy()

    def _propagate(self, T):
        """New globals of variables, of their parents, and subtree motions.

        Motion arrays carry an extra identity row at index -1 for "unmoved".
        """
        if self.route == "dense":
            return self._propagate_scalar(T)
        n = self.num_variables
        my, mp = np.zeros(n + 1), np.zeros((n + 1, 3))
        gy, gp = np.empty(n), np.empty((n, 3))
        py, pp = self.p0[0].copy(), self.p0[1].copy()
        g0y, g0p = self.g0
        for lvl in self.levels:
            a = self.anc[lvl]
            py[lvl], pp[lvl] = compose_arrays(my[a], mp[a], self.p0[0][lvl], self.p0[1][lvl])
            gy[lvl], gp[lvl] = compose_arrays(py[lvl], pp[lvl], T[lvl, 0], T[lvl, 1:])
            # motion = new ∘ old^-1
            dy = gy[lvl] - g0y[lvl]
            c, s = np.cos(dy), np.sin(dy)
            ox, oy = g0p[lvl, 0], g0p[lvl, 1]
            my[lvl] = wrap_yaw_array(dy)
            mp[lvl, 0] = gp[lvl, 0] - (c * ox - s * oy)
            mp[lvl, 1] = gp[lvl, 1] - (s * ox + c * oy)
            mp[lvl, 2] = gp[lvl, 2] - g0p[lvl, 2]
        return (gy, gp), (py, pp), (my, mp)

    def _propagate_scalar(self, T):
        # same as above one node at a time; cheaper for small variable sets
        motions, parents, globals_ = [], [], []
        for a, p0, g0inv, row in zip(self._anc, self._p0, self._g0inv, T.tolist()):
            par = p0 if a < 0 else compose(motions[a], p0)
            g = compose(par, row)
            parents.append(par)
            globals_.append(g)
            motions.append(compose(g, g0inv))
        motions.append(IDENTITY)
        G, P, M = np.array(globals_), np.array(parents), np.array(motions)
        return (G[:, 0], G[:, 1:]), (P[:, 0], P[:, 1:]), (M[:, 0], M[:, 1:])

    def _endpoints(self, motions):
        my, mp = motions
        uy, up = compose_arrays(my[self.au], mp[self.au], *self.u0)
        vy, vp = compose_arrays(my[self.av], mp[self.av], *self.v0)
        return uy, up, vy, vp

    def cost(self, T):
        _, _, motions = self._propagate(T)
        r, _ = residuals_global(*self._endpoints(motions), self.meas)
        return float(np.sum(cauchy_cost(chi2_terms(r, self.info), self.config.cauchy_c)))

    def linearize(self, T):
        (gy, gp), (py, pp), motions = self._propagate(T)
        uy, up, vy, vp = self._endpoints(motions)
        r, rel_t = residuals_global(uy, up, vy, vp, self.meas)
        s = chi2_terms(r, self.info)
        w = cauchy_weight(s, self.config.cauchy_c)[:, None] * self.info
        if self.route == "sparse":
            return self._linearize_sparse(gp, py, pp, uy, rel_t, r, w)
        n, m = self.num_variables, len(r)
        J = np.zeros((m, 4, n, 4))
        S = self.sign
        cu, su = np.cos(uy)[:, None], np.sin(uy)[:, None]
        dx = vp[:, 0][:, None] - gp[:, 0][None, :]
        dy = vp[:, 1][:, None] - gp[:, 1][None, :]
        # yaw column: R(-yaw_u) S (p_v - p_n)
        J[:, 0, :, 0] = S
        J[:, 1, :, 0] = S * (su * dx - cu * dy)
        J[:, 2, :, 0] = S * (cu * dx + su * dy)
        # translation block: R(yaw_parent - yaw_u)
        a = py[None, :] - uy[:, None]
        ca, sa = S * np.cos(a), S * np.sin(a)
        J[:, 1, :, 1] = ca
        J[:, 1, :, 2] = -sa
        J[:, 2, :, 1] = sa
        J[:, 2, :, 2] = ca
        J[:, 3, :, 3] = S
        Jm = J.reshape(4 * m, 4 * n)
        wf = w.ravel()
        H = Jm.T @ (wf[:, None] * Jm)
        g = Jm.T @ (wf * r.ravel())
        return (H, g), float(np.max(np.abs(g))) if g.size else 0.0

    def _linearize_sparse(self, gp, py, pp, uy, rel_t, r, w):
        n = self.num_variables
        ju, jv = global_jacobians(uy, rel_t)
        H, g = global_normal_equations(ju, jv, w, r, self.au, self.av, n)
        kinv = self._relative_from_global(gp, py, pp)
        Q = (kinv.T @ kinv).tocsc()
        grad_t = spla.spsolve(kinv.T.tocsc(), g)
        return (H, g, Q, kinv), float(np.max(np.abs(grad_t))) if n else 0.0

    def _relative_from_global(self, gp, py, pp):
        """Linear map from global increments to relative-pose increments."""
        n = self.num_variables
        c, s = np.cos(py), np.sin(py)
        diag = np.zeros((n, 4, 4))
        diag[:, 0, 0] = 1.0
        # R(-yaw_parent)
        diag[:, 1, 1] = c
        diag[:, 1, 2] = s
        diag[:, 2, 1] = -s
        diag[:, 2, 2] = c
        diag[:, 3, 3] = 1.0
        off = np.zeros((n, 4, 4))
        off[:, 0, 0] = -1.0
        off[:, 1:, 1:] = -diag[:, 1:, 1:]
        d = gp - pp
        sd = np.stack([-d[:, 1], d[:, 0], np.zeros(n)], axis=1)
        off[:, 1:, 0] = -np.einsum("nij,nj->ni", diag[:, 1:, 1:], sd)
        rows = np.arange(n)
        return assemble_blocks([(rows, rows, diag), (rows, self.anc, off)], n)

    def solve(self, system, lam):
        if self.route == "sparse":
            H, g, Q, kinv = system
            y = sparse_solve(H + lam * Q, -g)
            return kinv @ y
        H, g = system
        return dense_solve(H, g, lam)

    def retract(self, T, dx):
        out = T + dx.reshape(T.shape)
        out[:, 0] = wrap_yaw_array(out[:, 0])
        return out

    def commit(self, T):
        for nd, row in zip(self.nodes, T.tolist()):
            nd.rel = _make(*row)
        (gy, gp), _, (my, mp) = self._propagate(T)
        graph = self.graph
        cy, cp = graph.cache_yaw, graph.cache_pos
        if self.route == "sparse":
            cy[self.var_slot] = gy
            cp[self.var_slot] = gp
            return
        a = _deepest(_range_masks(self.sel, graph.cache_keys))
        moved = np.nonzero(a >= 0)[0]
        a = a[moved]
        cy[moved], cp[moved] = compose_arrays(my[a], mp[a], cy[moved], cp[moved])


def _deepest(masks):
    """Index of the last (deepest) True row per column, -1 if none."""
    n, m = masks.shape
    if n == 0:
        return np.full(m, -1, dtype=np.int64)
    last = n - 1 - np.argmax(masks[::-1], axis=0)
    return np.where(masks.any(axis=0), last, -1).astype(np.int64)


def _route(sel, config):
    mode = config.linear_solver
    if mode == "auto":
        return "sparse" if sel.all_states and len(sel) > config.dense_limit else "dense"
    if mode not in ("dense", "sparse"):
        raise ValueError(f"unknown linear solver {mode!r}")
    return mode


def optimize_lm(graph, sel, config=None):
    """Solve for the selected relative poses and write them back into the tree."""
    config = config or SolverConfig()
    if len(sel) == 0:
        raise ValueError("empty variable set")
    problem = TreeProblem(graph, sel, config, _route(sel, config))
    return levenberg_marquardt(problem, config)


def optimize_full_path(graph, loop, config=None):
    return optimize_lm(graph, select_full_path(graph, loop), config)


def optimize_all_states(graph, config=None):
    return optimize_lm(graph, select_all_states(graph), config)


TOPDOWN_RULES = ("one_step", "strict", "loop_chi2", "full")


def _frontier_done(graph, loop, res, config):
    rule = config.topdown_rule
    if rule == "full":
        return False
    if rule == "strict":
        return res.converged and res.iterations <= 1
    settled = res.converged_in_one(config.topdown_tol)
    if rule == "one_step":
        return settled
    if rule == "loop_chi2":
        r = residual_from_poses(graph.cached_pose(loop.i), graph.cached_pose(loop.j), loop.meas)
        return settled and mahalanobis_sq(r, loop.cov) < config.gamma
    raise ValueError(f"unknown top-down rule {rule!r}")


def optimize_top_down(graph, loop, config=None):
    """Grow the frontier until a frontier's solve settles in one step.

    The returned costs refer to the last frontier's edge set; edges left out
    of an earlier frontier are constant during that solve, so the reported
    decrease is exact.
    """
    config = config or SolverConfig()
    total = OptResult()
    decrease = 0.0
    last = None
    for sel in select_top_down(graph, loop):
        res = optimize_lm(graph, sel, config)
        total.frontier_sizes.append(len(sel))
        total.iterations += res.iterations
        total.accepted_steps += res.accepted_steps
        decrease += res.cost_initial - res.cost_final
        last = res
        if _frontier_done(graph, loop, res, config):
            break
    if last is None:
        raise ValueError("loop endpoints coincide")
    total.cost_final = last.cost_final
    total.cost_initial = last.cost_final + decrease
    total.converged = last.converged
    total.first_step_accepted = last.first_step_accepted
    total.num_variables = max(total.frontier_sizes)
    return total


def optimize_loop(graph, loop, method, config=None):
    if method == "tree-top-down":
        return optimize_top_down(graph, loop, config)
    if method == "tree-full-path":
        return optimize_full_path(graph, loop, config)
    if method == "tree-all":
        return optimize_all_states(graph, config)
    raise ValueError(f"unknown tree method {method!r}")


@dataclass
class GateResult:
    accepted: bool
    chi2: float
    result: OptResult
    snapshot_size: int


def add_loop_with_gate(graph, loop, config=None, method="tree-top-down", gate=True):
    """Register ``loop``, optimise, and roll back if its residual fails the chi-square test.

    With the gate on, top-down under the default one-step rule switches to
    the loop-chi2 rule so the frontier keeps growing while the new loop is
    still inconsistent; the test is then made on a converged local solve.
    """
    config = config or SolverConfig()
    if gate and method == "tree-top-down" and config.topdown_rule == "one_step":
        # a frontier that stops early must not be mistaken for a bad loop
        config = replace(config, topdown_rule="loop_chi2")
    tree = graph.tree
    idx = graph.add_edge(loop)
    snap = None
    if gate:
        if method == "tree-all":
            snap = tree.snapshot_keys(tree.keys())
        else:
            snap = tree.snapshot_path(loop.i, loop.j)
    try:
        res = optimize_loop(graph, loop, method, config)
    except SolverError:
        if snap is None:
            raise
        res = None
    chi2 = float(graph.edge_chi2(np.array([idx]))[0]) if res is not None else float("inf")
    accepted = not gate or chi2 < config.gamma
    if not accepted:
        tree.restore_path(snap)
        graph.refresh_cache(None if method == "tree-all" else tree.lca(loop.i, loop.j))
        graph.edges.pop()
        if res is None:
            res = OptResult()
    return GateResult(accepted, chi2, res, len(snap) if snap is not None else 0)
