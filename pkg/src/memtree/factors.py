"""Relative-pose factors, Cauchy loss and their derivatives.

Residual of an edge ``i -> j`` with measurement ``m`` (pose of j in i)::

    rel   = relative(g_i, g_j)
    r_yaw = wrap(m.yaw - rel.yaw)
    r_pos = m.trans - rel.trans

where ``g_i`` and ``g_j`` are expressed in any common frame; the memory tree
uses the frame of the two nodes' lowest common ancestor.
"""

import math
from dataclasses import dataclass

import numpy as np

from .geometry import IDENTITY, Pose4, compose, relative, wrap_yaw, wrap_yaw_array

SEQUENTIAL = "sequential"
LOOP = "loop"

# yaw rad^2, then x, y, z in m^2
DEFAULT_COVARIANCE = (0.01, 0.04, 0.04, 0.04)

# 0.95 quantile of chi-square with 4 degrees of freedom
CHI2_4DOF_95 = 9.4877

# d R(theta) / d theta = S @ R(theta)
_S = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])


@dataclass(frozen=True)
class RelEdge:
    """Measured pose of ``j``'s frame in ``i``'s frame with diagonal covariance."""

    i: int
    j: int
    meas: Pose4
    cov: tuple = DEFAULT_COVARIANCE
    kind: str = LOOP

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError(f"self-edge on {self.i}")
        cov = tuple(float(c) for c in self.cov)
        if len(cov) != 4 or not all(c > 0 and math.isfinite(c) for c in cov):
            raise ValueError(f"covariance diagonal must be 4 positive values, got {self.cov!r}")
        object.__setattr__(self, "cov", cov)
        if self.kind not in (SEQUENTIAL, LOOP):
            raise ValueError(f"unknown edge kind {self.kind!r}")

    @property
    def info(self):
        return tuple(1.0 / c for c in self.cov)


def cauchy_cost(s, c=1.0):
    """rho_c(s) = c^2 log(1 + s / c^2) for a squared Mahalanobis norm ``s``."""
    s = np.asarray(s, dtype=float)
    if np.any(s < 0):
        raise ValueError("squared norm must be non-negative")
    c2 = c * c
    out = c2 * np.log1p(s / c2)
    return float(out) if out.ndim == 0 else out


def cauchy_weight(s, c=1.0):
    """First derivative rho_c'(s), used as the IRLS weight."""
    return 1.0 / (1.0 + np.asarray(s, dtype=float) / (c * c))


def residual_from_poses(gi, gj, meas):
    rel = relative(gi, gj)
    return np.array(
        [wrap_yaw(meas.yaw - rel.yaw), meas.x - rel.x, meas.y - rel.y, meas.z - rel.z]
    )


def mahalanobis_sq(r, cov):
    r = np.asarray(r, dtype=float)
    return float(np.sum(r * r / np.asarray(cov, dtype=float)))


def _chain(tree, key, top):
    """Nodes from ``key`` up to (excluding) ``top``, deepest first."""
    out = []
    n = tree.node(key)
    t = tree.node(top)
    while n is not t:
        if n is None:
            raise ValueError(f"{top!r} is not an ancestor of {key!r}")
        out.append(n)
        n = n.parent
    return out


def _frame_poses(chain):
    """Poses in the top frame for each chain node and for its parent."""
    poses, parents = [], []
    g = IDENTITY
    for n in reversed(chain):
        parents.append(g)
        g = compose(g, n.rel)
        poses.append(g)
    return poses[::-1], parents[::-1]


def edge_residual(tree, edge, lca=None):
    """Residual of ``edge`` evaluated through the chain to the LCA frame.

    Args:
        tree: a :class:`~memtree.tree.MemoryTree`.
        edge: the measurement.
        lca: key of a common ancestor of both endpoints; defaults to the LCA.

    Raises:
        ValueError: if ``lca`` is not an ancestor of both endpoints.
    """
    if lca is None:
        lca = tree.lca(edge.i, edge.j)
    gi = tree.pose_in_ancestor(edge.i, lca)
    gj = tree.pose_in_ancestor(edge.j, lca)
    return residual_from_poses(gi, gj, edge.meas)


def edge_jacobian(tree, edge, lca, variables):
    """Analytic Jacobian of :func:`edge_residual` w.r.t. variable relative poses.

    Each variable contributes a 4x4 block for additive perturbation of its
    relative ``(yaw, x, y, z)``. Only variables on the two chains below the
    LCA influence the residual.

    Returns:
        ``(J, keys)`` with ``J`` of shape ``(4, 4 * len(keys))``.
    """
    variables = set(variables)
    ci = _chain(tree, edge.i, lca)
    cj = _chain(tree, edge.j, lca)
    pi, ppi = _frame_poses(ci)
    pj, ppj = _frame_poses(cj)
    gi = pi[0] if ci else IDENTITY
    gj = pj[0] if cj else IDENTITY
    c, s = math.cos(gi.yaw), math.sin(gi.yaw)
    r_inv = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    pos_j = np.array(gj[1:])

    keys, blocks = [], []
    for chain, poses, parents, sign in ((ci, pi, ppi, 1.0), (cj, pj, ppj, -1.0)):
        for n, gn, gp in zip(chain, poses, parents):
            if n.key not in variables:
                continue
            blk = np.zeros((4, 4))
            blk[0, 0] = sign
            blk[1:, 0] = sign * (r_inv @ _S @ (pos_j - np.array(gn[1:])))
            a = gp.yaw - gi.yaw
            ca, sa = math.cos(a), math.sin(a)
            blk[1:, 1:] = sign * np.array([[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]])
            keys.append(n.key)
            blocks.append(blk)
    if not blocks:
        return np.zeros((4, 0)), []
    return np.hstack(blocks), keys


# ----------------------------------------------------------------------
# vectorised global-frame helpers


def compose_arrays(ayaw, apos, byaw, bpos):
    """Elementwise ``a ∘ b`` on arrays of yaws ``(n,)`` and positions ``(n, 3)``."""
    c, s = np.cos(ayaw), np.sin(ayaw)
    out = np.empty_like(bpos)
    out[:, 0] = apos[:, 0] + c * bpos[:, 0] - s * bpos[:, 1]
    out[:, 1] = apos[:, 1] + s * bpos[:, 0] + c * bpos[:, 1]
    out[:, 2] = apos[:, 2] + bpos[:, 2]
    return wrap_yaw_array(ayaw + byaw), out


def relative_arrays(ayaw, apos, byaw, bpos):
    c, s = np.cos(ayaw), np.sin(ayaw)
    d = bpos - apos
    out = np.empty_like(d)
    out[:, 0] = c * d[:, 0] + s * d[:, 1]
    out[:, 1] = -s * d[:, 0] + c * d[:, 1]
    out[:, 2] = d[:, 2]
    return wrap_yaw_array(byaw - ayaw), out


def residuals_global(uyaw, upos, vyaw, vpos, meas):
    """Residuals ``(E, 4)`` and relative translations ``(E, 3)``.

    ``meas`` is an ``(E, 4)`` array of ``(yaw, x, y, z)`` measurements.
    """
    ryaw, rpos = relative_arrays(uyaw, upos, vyaw, vpos)
    r = np.empty((len(uyaw), 4))
    r[:, 0] = wrap_yaw_array(meas[:, 0] - ryaw)
    r[:, 1:] = meas[:, 1:] - rpos
    return r, rpos


def global_jacobians(uyaw, rel_t):
    """Blocks ``(E, 4, 4)`` of d r / d(yaw, pos) of each endpoint's global pose."""
    n = len(uyaw)
    c, s = np.cos(uyaw), np.sin(uyaw)
    ju = np.zeros((n, 4, 4))
    jv = np.zeros((n, 4, 4))
    ju[:, 0, 0] = 1.0
    jv[:, 0, 0] = -1.0
    ju[:, 1, 0] = -rel_t[:, 1]
    ju[:, 2, 0] = rel_t[:, 0]
    # R(-yaw_u)
    ju[:, 1, 1] = c
    ju[:, 1, 2] = s
    ju[:, 2, 1] = -s
    ju[:, 2, 2] = c
    ju[:, 3, 3] = 1.0
    jv[:, 1:, 1:] = -ju[:, 1:, 1:]
    return ju, jv


def chi2_terms(r, info):
    """Squared Mahalanobis norm per edge for residuals ``(E, 4)``."""
    return np.sum(r * r * info, axis=1)
