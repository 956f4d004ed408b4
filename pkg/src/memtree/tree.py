"""AVL-balanced binary search tree of keyframes with parent-relative poses.

Every node stores the pose of its own frame expressed in its parent node's
frame; the root stores its global pose. Structural edits (insertion,
rotation, deletion) re-express the few affected relative poses locally so
that the global pose of every surviving node is left unchanged.
"""

from dataclasses import dataclass, field

from .geometry import IDENTITY, compose, inverse, relative


class TopologyChangedError(RuntimeError):
    """A path snapshot was restored after the tree was restructured."""


class TreeNode:
    __slots__ = ("key", "rel", "height", "left", "right", "parent")

    def __init__(self, key, rel, parent=None):
        self.key = key
        self.rel = rel
        self.height = 1
        self.left = None
        self.right = None
        self.parent = parent

    def __repr__(self):
        return f"TreeNode(key={self.key!r}, height={self.height})"


def _h(node):
    return node.height if node is not None else 0


def _update_height(node):
    lh = node.left.height if node.left is not None else 0
    rh = node.right.height if node.right is not None else 0
    node.height = (lh if lh > rh else rh) + 1


@dataclass
class PathSnapshot:
    """Relative poses of every node on a tree path, captured for rollback."""

    entries: list = field(default_factory=list)
    version: int = -1

    def __len__(self):
        return len(self.entries)

    def keys(self):
        return [k for k, _ in self.entries]


class MemoryTree:
    """Balanced BST keyed by keyframe index, storing parent-relative poses.

    Mutations must be externally serialised; read-only queries may run
    concurrently with each other.

    Attributes:
        root: root node or None.
        index: mapping key -> node.
        version: incremented on every insert/remove; snapshots check it.
        compositions: running count of pose compositions done by
            :meth:`global_pose` (instrumentation).
    """

    def __init__(self):
        self.root = None
        self.index = {}
        self.version = 0
        self.compositions = 0

    def __len__(self):
        return len(self.index)

    def __contains__(self, key):
        return key in self.index

    @property
    def count(self):
        return len(self.index)

    @property
    def height(self):
        return self.root.height if self.root is not None else 0

    def node(self, key):
        try:
            return self.index[key]
        except KeyError:
            raise KeyError(f"key {key!r} not in tree") from None

    def rel_pose(self, key):
        return self.node(key).rel

    def set_rel_pose(self, key, pose):
        self.node(key).rel = pose

    def parent_key(self, key):
        p = self.node(key).parent
        return p.key if p is not None else None

    def keys(self):
        """Keys in ascending order."""
        out = []
        stack = []
        n = self.root
        while stack or n is not None:
            while n is not None:
                stack.append(n)
                n = n.left
            n = stack.pop()
            out.append(n.key)
            n = n.right
        return out

    # ------------------------------------------------------------------
    # queries

    def global_pose(self, key):
        """Compose relative poses from the root down to ``key``."""
        n = self.node(key)
        g = n.rel
        n = n.parent
        k = 0
        while n is not None:
            g = compose(n.rel, g)
            n = n.parent
            k += 1
        self.compositions += k
        return g

    def pose_in_ancestor(self, key, ancestor):
        """Pose of ``key``'s frame expressed in the frame of ``ancestor``."""
        n = self.node(key)
        a = self.node(ancestor)
        g = IDENTITY
        while n is not a:
            if n is None:
                raise ValueError(f"{ancestor!r} is not an ancestor of {key!r}")
            g = compose(n.rel, g)
            n = n.parent
        return g

    def all_global_poses(self):
        """Global pose of every node in one top-down sweep."""
        out = {}
        if self.root is None:
            return out
        stack = [(self.root, self.root.rel)]
        while stack:
            n, g = stack.pop()
            out[n.key] = g
            if n.left is not None:
                stack.append((n.left, compose(g, n.left.rel)))
            if n.right is not None:
                stack.append((n.right, compose(g, n.right.rel)))
        return out

    def depth(self, key):
        """Number of edges from the root to ``key``."""
        n = self.node(key)
        d = 0
        while n.parent is not None:
            n = n.parent
            d += 1
        return d

    def lca(self, a, b):
        """Lowest common ancestor by BST descent."""
        self.node(a)
        self.node(b)
        lo, hi = (a, b) if a <= b else (b, a)
        n = self.root
        while True:
            if hi < n.key:
                n = n.left
            elif lo > n.key:
                n = n.right
            else:
                return n.key

    def path(self, a, b):
        """Node keys on the tree path a -> lca(a, b) -> b, endpoints included."""
        top = self.node(self.lca(a, b))
        up = []
        n = self.index[a]
        while n is not top:
            up.append(n.key)
            n = n.parent
        down = []
        n = self.index[b]
        while n is not top:
            down.append(n.key)
            n = n.parent
        return up + [top.key] + down[::-1]

    def subtree_range(self, key):
        """Smallest and largest key in the subtree rooted at ``key``."""
        n = self.node(key)
        lo = n
        while lo.left is not None:
            lo = lo.left
        hi = n
        while hi.right is not None:
            hi = hi.right
        return lo.key, hi.key

    def is_ancestor(self, anc, key):
        lo, hi = self.subtree_range(anc)
        return key in self.index and lo <= key <= hi

    # ------------------------------------------------------------------
    # snapshots

    def snapshot_path(self, a, b):
        return self.snapshot_keys(self.path(a, b))

    def snapshot_keys(self, keys):
        return PathSnapshot([(k, self.node(k).rel) for k in keys], self.version)

    def restore_path(self, snap):
        if snap.version != self.version:
            raise TopologyChangedError(
                f"tree changed since snapshot (version {snap.version} -> {self.version})"
            )
        for k, rel in snap.entries:
            self.index[k].rel = rel

    # ------------------------------------------------------------------
    # mutation

    def insert(self, key, global_pose):
        if key in self.index:
            raise ValueError(f"duplicate key {key!r}")
        if self.root is None:
            node = TreeNode(key, global_pose)
            self.root = node
            self.index[key] = node
            self.version += 1
            return node
        cur = self.root
        g = cur.rel
        while True:
            nxt = cur.left if key < cur.key else cur.right
            if nxt is None:
                break
            g = compose(g, nxt.rel)
            cur = nxt
        node = TreeNode(key, relative(g, global_pose), cur)
        if key < cur.key:
            cur.left = node
        else:
            cur.right = node
        self.index[key] = node
        self.version += 1
        self._rebalance_from(cur)
        return node

    def remove(self, key):
        d = self.node(key)
        if d.left is not None and d.right is not None:
            s = d.right
            while s.left is not None:
                s = s.left
            L = d.left
            if s is d.right:
                L.rel = compose(inverse(s.rel), L.rel)
                s.rel = compose(d.rel, s.rel)
                s.left = L
                L.parent = s
                start = s
            else:
                sp = s.parent
                # pose of s in d's frame
                g = s.rel
                n = sp
                while n is not d:
                    g = compose(n.rel, g)
                    n = n.parent
                sr = s.right
                if sr is not None:
                    sr.rel = compose(s.rel, sr.rel)
                    sr.parent = sp
                sp.left = sr
                R = d.right
                inv_g = inverse(g)
                L.rel = compose(inv_g, L.rel)
                R.rel = compose(inv_g, R.rel)
                s.rel = compose(d.rel, g)
                s.left = L
                s.right = R
                L.parent = s
                R.parent = s
                start = sp
            self._replace_child(d.parent, d, s)
            s.parent = d.parent
        else:
            c = d.left if d.left is not None else d.right
            if c is not None:
                c.rel = compose(d.rel, c.rel)
                c.parent = d.parent
            self._replace_child(d.parent, d, c)
            start = d.parent
        del self.index[key]
        d.left = d.right = d.parent = None
        self.version += 1
        if start is not None:
            self._rebalance_from(start)

    def _replace_child(self, parent, old, new):
        if parent is None:
            self.root = new
        elif parent.left is old:
            parent.left = new
        else:
            parent.right = new

    def _rotate_right(self, y):
        x = y.left
        b = x.right
        rx = x.rel
        x.rel = compose(y.rel, rx)
        y.rel = inverse(rx)
        if b is not None:
            b.rel = compose(rx, b.rel)
            b.parent = y
        y.left = b
        self._replace_child(y.parent, y, x)
        x.parent = y.parent
        x.right = y
        y.parent = x
        _update_height(y)
        _update_height(x)
        return x

    def _rotate_left(self, x):
        y = x.right
        b = y.left
        ry = y.rel
        y.rel = compose(x.rel, ry)
        x.rel = inverse(ry)
        if b is not None:
            b.rel = compose(ry, b.rel)
            b.parent = x
        x.right = b
        self._replace_child(x.parent, x, y)
        y.parent = x.parent
        y.left = x
        x.parent = y
        _update_height(x)
        _update_height(y)
        return y

    def _rebalance_from(self, node):
        while node is not None:
            lh, rh = _h(node.left), _h(node.right)
            bf = lh - rh
            if bf > 1:
                if _h(node.left.left) < _h(node.left.right):
                    self._rotate_left(node.left)
                node = self._rotate_right(node)
            elif bf < -1:
                if _h(node.right.right) < _h(node.right.left):
                    self._rotate_right(node.right)
                node = self._rotate_left(node)
            else:
                node.height = (lh if lh > rh else rh) + 1
            node = node.parent

    # ------------------------------------------------------------------
    # debugging / verification

    def serialize(self):
        """Deterministic pre-order dump: key, yaw, x, y, z, child flags."""
        lines = []
        stack = [self.root] if self.root is not None else []
        while stack:
            n = stack.pop()
            yaw, x, y, z = n.rel
            lines.append(
                f"{n.key} {yaw!r} {x!r} {y!r} {z!r} "
                f"{int(n.left is not None)} {int(n.right is not None)}"
            )
            if n.right is not None:
                stack.append(n.right)
            if n.left is not None:
                stack.append(n.left)
        return "\n".join(lines) + ("\n" if lines else "")

    def check_invariants(self):
        """Raise AssertionError if BST order, heights, AVL balance or links break."""
        seen = 0
        if self.root is not None:
            assert self.root.parent is None, "root has a parent"
        stack = [(self.root, None, None)] if self.root is not None else []
        while stack:
            n, lo, hi = stack.pop()
            seen += 1
            assert self.index.get(n.key) is n, f"index mismatch at {n.key!r}"
            assert lo is None or n.key > lo, f"BST order broken at {n.key!r}"
            assert hi is None or n.key < hi, f"BST order broken at {n.key!r}"
            lh, rh = _h(n.left), _h(n.right)
            assert n.height == max(lh, rh) + 1, f"stale height at {n.key!r}"
            assert abs(lh - rh) <= 1, f"AVL balance broken at {n.key!r}"
            for c in (n.left, n.right):
                if c is not None:
                    assert c.parent is n, f"parent link broken at {c.key!r}"
            if n.left is not None:
                stack.append((n.left, lo, n.key))
            if n.right is not None:
                stack.append((n.right, n.key, hi))
        assert seen == len(self.index), "unreachable nodes in index"
