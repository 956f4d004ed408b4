"""Memory tree plus registered edges plus a vectorised global-pose cache.

The tree is the single source of truth for the map. The cache holds every
node's global pose in numpy arrays so a solve can gather endpoint poses
without walking the tree; it is updated from the rigid subtree motions an
optimisation applies and can always be rebuilt from the tree.
"""

from dataclasses import replace

import numpy as np

from .factors import LOOP, SEQUENTIAL, chi2_terms, residuals_global
from .geometry import _make, compose, inverse
from .tree import MemoryTree

_GONE = np.iinfo(np.int64).min


class _Growable:
    """Numpy array with amortised O(1) append along axis 0."""

    def __init__(self, shape=(), dtype=float, fill=0):
        self._a = np.full((16,) + shape, fill, dtype=dtype)
        self._fill = fill
        self.n = 0

    def append(self, value):
        if self.n == len(self._a):
            grown = np.full((2 * len(self._a),) + self._a.shape[1:], self._fill, self._a.dtype)
            grown[: self.n] = self._a[: self.n]
            self._a = grown
        self._a[self.n] = value
        self.n += 1

    def pop(self):
        self.n -= 1

    @property
    def view(self):
        return self._a[: self.n]

    def keep(self, mask):
        kept = self._a[: self.n][mask]
        self._a[: len(kept)] = kept
        self.n = len(kept)


class EdgeStore:
    """Registered measurements with column arrays for vectorised evaluation."""

    def __init__(self):
        self.edges = []
        self._ki = _Growable(dtype=np.int64)
        self._kj = _Growable(dtype=np.int64)
        self._si = _Growable(dtype=np.int64)
        self._sj = _Growable(dtype=np.int64)
        self._meas = _Growable((4,))
        self._info = _Growable((4,))

    def __len__(self):
        return len(self.edges)

    def __iter__(self):
        return iter(self.edges)

    def __getitem__(self, idx):
        return self.edges[idx]

    def append(self, edge, si, sj):
        self.edges.append(edge)
        self._ki.append(edge.i)
        self._kj.append(edge.j)
        self._si.append(si)
        self._sj.append(sj)
        self._meas.append(tuple(edge.meas))
        self._info.append(edge.info)
        return len(self.edges) - 1

    def pop(self):
        edge = self.edges.pop()
        for col in self._cols():
            col.pop()
        return edge

    def keep(self, mask):
        mask = np.asarray(mask, dtype=bool)
        self.edges = [e for e, k in zip(self.edges, mask) if k]
        for col in self._cols():
            col.keep(mask)

    def _cols(self):
        return (self._ki, self._kj, self._si, self._sj, self._meas, self._info)

    ki = property(lambda self: self._ki.view)
    kj = property(lambda self: self._kj.view)
    si = property(lambda self: self._si.view)
    sj = property(lambda self: self._sj.view)
    meas = property(lambda self: self._meas.view)
    info = property(lambda self: self._info.view)

    @property
    def is_loop(self):
        return np.array([e.kind == LOOP for e in self.edges], dtype=bool)


class PoseGraph:
    """Keyframes in a :class:`MemoryTree` together with their measurements."""

    def __init__(self):
        self.tree = MemoryTree()
        self.edges = EdgeStore()
        self.slot = {}
        self._keys = _Growable(dtype=np.int64, fill=_GONE)
        self._yaw = _Growable()
        self._pos = _Growable((3,))

    def __len__(self):
        return len(self.tree)

    @property
    def root_key(self):
        return self.tree.root.key if self.tree.root is not None else None

    @property
    def cache_keys(self):
        return self._keys.view

    @property
    def cache_yaw(self):
        return self._yaw.view

    @property
    def cache_pos(self):
        return self._pos.view

    def insert(self, key, global_pose):
        self.tree.insert(key, global_pose)
        self.slot[key] = self._keys.n
        self._keys.append(key)
        self._yaw.append(global_pose[0])
        self._pos.append(global_pose[1:])

    def remove(self, key):
        """Remove a keyframe; every edge touching it must already be gone."""
        ki, kj = self.edges.ki, self.edges.kj
        if np.any((ki == key) | (kj == key)):
            raise ValueError(f"edges still reference key {key!r}")
        self.tree.remove(key)
        self._keys.view[self.slot.pop(key)] = _GONE

    def prune(self, key):
        """Drop an interior odometry keyframe that no loop references.

        Its two sequential edges ``(a, key)`` and ``(key, b)`` are replaced by
        one sequential edge ``(a, b)`` whose measurement is their composition
        and whose diagonal covariance is their sum. Returns the new edge.
        """
        ki, kj = self.edges.ki, self.edges.kj
        touching = np.nonzero((ki == key) | (kj == key))[0]
        edges = [self.edges[k] for k in touching]
        if len(edges) != 2 or any(e.kind != SEQUENTIAL for e in edges):
            raise ValueError(f"key {key!r} is not an interior odometry node")
        # orient both as (other -> key) / (key -> other)
        inbound = [e if e.j == key else replace(e, i=e.j, j=e.i, meas=inverse(e.meas)) for e in edges]
        inbound.sort(key=lambda e: e.i)
        first = inbound[0]
        second = inbound[1]
        merged = replace(
            first,
            j=second.i,
            meas=compose(first.meas, inverse(second.meas)),
            cov=tuple(x + y for x, y in zip(first.cov, second.cov)),
        )
        mask = np.ones(len(self.edges), dtype=bool)
        mask[touching] = False
        self.edges.keep(mask)
        self.remove(key)
        self.add_edge(merged)
        return merged

    def add_edge(self, edge):
        for k in (edge.i, edge.j):
            if k not in self.slot:
                raise KeyError(f"edge references unknown key {k!r}")
        return self.edges.append(edge, self.slot[edge.i], self.slot[edge.j])

    def global_pose(self, key):
        return self.tree.global_pose(key)

    def cached_pose(self, key):
        s = self.slot[key]
        y, p = self._yaw.view[s], self._pos.view[s]
        return _make(float(y), float(p[0]), float(p[1]), float(p[2]))

    def refresh_cache(self, key=None):
        """Recompute cached globals from the tree, for ``key``'s subtree or all."""
        if self.tree.root is None:
            return
        if key is None or self.tree.node(key).parent is None:
            start, g = self.tree.root, self.tree.root.rel
        else:
            start = self.tree.node(key)
            g = self.tree.global_pose(key)
        yaw, pos, slot = self._yaw.view, self._pos.view, self.slot
        stack = [(start, g)]
        while stack:
            n, g = stack.pop()
            s = slot[n.key]
            yaw[s] = g[0]
            pos[s] = g[1:]
            if n.left is not None:
                stack.append((n.left, compose(g, n.left.rel)))
            if n.right is not None:
                stack.append((n.right, compose(g, n.right.rel)))

    def edge_residuals(self, idx=None):
        """Residuals ``(E, 4)`` of registered edges from cached global poses."""
        st = self.edges
        si, sj, meas = st.si, st.sj, st.meas
        if idx is not None:
            si, sj, meas = si[idx], sj[idx], meas[idx]
        yaw, pos = self._yaw.view, self._pos.view
        r, _ = residuals_global(yaw[si], pos[si], yaw[sj], pos[sj], meas)
        return r

    def edge_chi2(self, idx=None):
        info = self.edges.info if idx is None else self.edges.info[idx]
        return chi2_terms(self.edge_residuals(idx), info)

    def total_chi2(self, mask=None):
        """Non-robust cost summed over all (or ``mask``-selected) edges."""
        if len(self.edges) == 0:
            return 0.0
        c = self.edge_chi2()
        return float(np.sum(c if mask is None else c[mask]))

    def trajectory(self):
        """Keys in ascending order with their global poses from the tree."""
        poses = self.tree.all_global_poses()
        keys = sorted(poses)
        return keys, [poses[k] for k in keys]
