"""Levenberg-Marquardt driver shared by the tree and global-frame solvers."""

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse import linalg as spla

from .factors import CHI2_4DOF_95, DEFAULT_COVARIANCE


class SolverError(RuntimeError):
    pass


@dataclass
class SolverConfig:
    """Tunable solver constants (exposed on the command line).

    ``topdown_tol`` is the relative cost decrease below which every step after
    the first counts as "no further progress" for the top-down stopping rule;
    set ``topdown_rule`` to ``"full"`` to always expand to the whole path.
    """

    max_iters: int = 50
    lambda_init: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.5
    lambda_max: float = 1e16
    ftol: float = 1e-8
    gtol: float = 1e-10
    cauchy_c: float = 1.0
    gamma: float = CHI2_4DOF_95
    sigma: tuple = DEFAULT_COVARIANCE
    topdown_rule: str = "one_step"
    topdown_tol: float = 1e-6
    linear_solver: str = "auto"
    dense_limit: int = 256


@dataclass
class OptResult:
    iterations: int = 0
    cost_initial: float = 0.0
    cost_final: float = 0.0
    num_variables: int = 0
    converged: bool = False
    accepted_steps: int = 0
    first_step_accepted: bool = False
    decreases: list = field(default_factory=list)
    frontier_sizes: list = field(default_factory=list)

    def converged_in_one(self, tol):
        """True if the solve settled after at most one significant accepted step."""
        if not self.converged:
            return False
        if self.accepted_steps == 0:
            return True
        return self.first_step_accepted and all(d < tol for d in self.decreases[1:])


def levenberg_marquardt(problem, config):
    """Minimise a robustified least-squares ``problem`` in place.

    ``problem`` provides ``initial()``, ``cost(x)``, ``linearize(x)`` returning
    ``(system, grad_inf_norm)``, ``solve(system, lam)``, ``retract(x, dx)`` and
    ``commit(x)``. Accepted steps never increase the cost.
    """
    x = problem.initial()
    cost = problem.cost(x)
    if not math.isfinite(cost):
        raise SolverError(f"non-finite initial cost {cost!r}")
    res = OptResult(cost_initial=cost, cost_final=cost, num_variables=problem.num_variables)
    lam = config.lambda_init
    it = 0
    while it < config.max_iters:
        system, gnorm = problem.linearize(x)
        if gnorm < config.gtol:
            res.converged = True
            break
        accepted = False
        while it < config.max_iters:
            it += 1
            dx = problem.solve(system, lam)
            x_new = problem.retract(x, dx)
            c_new = problem.cost(x_new)
            if math.isfinite(c_new) and c_new < cost:
                if res.accepted_steps == 0 and it == 1:
                    res.first_step_accepted = True
                res.accepted_steps += 1
                res.decreases.append((cost - c_new) / cost)
                x, cost = x_new, c_new
                lam = max(lam * config.lambda_down, 1e-15)
                accepted = True
                break
            lam *= config.lambda_up
            if lam > config.lambda_max:
                break
        if not accepted:
            # no descent direction left at any damping: stationary to working precision
            res.converged = lam > config.lambda_max
            break
        if res.decreases[-1] < config.ftol or cost == 0.0:
            res.converged = True
            break
    res.iterations = it
    res.cost_final = cost
    problem.commit(x)
    return res


def dense_solve(h, g, lam):
    a = h + lam * np.eye(h.shape[0])
    try:
        c = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise SolverError("normal equations not positive definite after damping") from exc
    y = np.linalg.solve(c, -g)
    return np.linalg.solve(c.T, y)


def sparse_solve(a, rhs):
    """Solve a symmetric positive definite sparse system.

    SuperLU in symmetric mode with diagonal pivots behaves like a sparse
    LDL^T with a minimum-degree ordering on A + A^T.
    """
    try:
        lu = spla.splu(
            a.tocsc(),
            permc_spec="MMD_AT_PLUS_A",
            diag_pivot_thresh=0.0,
            options={"SymmetricMode": True},
        )
    except RuntimeError as exc:
        raise SolverError(f"sparse factorisation failed: {exc}") from exc
    out = lu.solve(rhs)
    if not np.all(np.isfinite(out)):
        raise SolverError("sparse solve produced non-finite values")
    return out


_I4 = np.arange(4)


def assemble_blocks(blocks, nvar):
    """Sum 4x4 blocks ``[(row_idx, col_idx, data(E,4,4)), ...]`` into a CSC matrix.

    Blocks with a negative row or column index (fixed variables) are dropped.
    """
    rows, cols, vals = [], [], []
    for ri, ci, data in blocks:
        keep = (ri >= 0) & (ci >= 0)
        if not np.any(keep):
            continue
        ri, ci, data = ri[keep], ci[keep], data[keep]
        r = (4 * ri)[:, None, None] + _I4[None, :, None]
        c = (4 * ci)[:, None, None] + _I4[None, None, :]
        rows.append(np.broadcast_to(r, data.shape).ravel())
        cols.append(np.broadcast_to(c, data.shape).ravel())
        vals.append(data.ravel())
    n = 4 * nvar
    if not rows:
        return sp.csc_matrix((n, n))
    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsc()


def assemble_vector(parts, nvar):
    """Sum per-edge 4-vectors ``[(idx, data(E,4)), ...]`` into a dense gradient."""
    g = np.zeros(4 * nvar)
    for idx, data in parts:
        keep = idx >= 0
        if np.any(keep):
            pos = (4 * idx[keep])[:, None] + _I4[None, :]
            np.add.at(g, pos.ravel(), data[keep].ravel())
    return g


def global_normal_equations(ju, jv, w, r, va, vb, nvar):
    """Gauss-Newton system for edges with endpoint Jacobians ``ju``, ``jv``.

    ``w`` holds the per-component weights (robust weight times information)
    and ``va``/``vb`` the variable index of each endpoint (-1 when fixed).
    """
    wju = w[:, :, None] * ju
    wjv = w[:, :, None] * jv
    juT = ju.transpose(0, 2, 1)
    jvT = jv.transpose(0, 2, 1)
    h = assemble_blocks(
        [
            (va, va, juT @ wju),
            (va, vb, juT @ wjv),
            (vb, va, jvT @ wju),
            (vb, vb, jvT @ wjv),
        ],
        nvar,
    )
    wr = (w * r)[:, :, None]
    g = assemble_vector([(va, (juT @ wr)[:, :, 0]), (vb, (jvT @ wr)[:, :, 0])], nvar)
    return h, g
