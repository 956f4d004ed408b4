import math

import numpy as np
import pytest

from memtree.factors import SEQUENTIAL, RelEdge
from memtree.geometry import Pose4, compose, relative
from memtree.graph import PoseGraph


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_pose(rng, scale=5.0):
    return Pose4(rng.uniform(-math.pi, math.pi), rng.uniform(-scale, scale, 3))


def hmat(p):
    """4x4 homogeneous matrix built independently of the library."""
    c, s = math.cos(p[0]), math.sin(p[0])
    return np.array(
        [[c, -s, 0.0, p[1]], [s, c, 0.0, p[2]], [0.0, 0.0, 1.0, p[3]], [0.0, 0.0, 0.0, 1.0]]
    )


def pose_close(a, b, tol=1e-12):
    dyaw = abs(math.remainder(a[0] - b[0], 2 * math.pi))
    return dyaw <= tol and max(abs(a[k] - b[k]) for k in (1, 2, 3)) <= tol


def noisy(rng, p, sy=0.05, sx=0.1):
    return Pose4(p.yaw + rng.normal(0, sy), np.asarray(p.trans) + rng.normal(0, sx, 3))


def chain_graph(rng, n, n_loops, sy=0.05, sx=0.1, step=1.0):
    """Odometry chain with random loop edges, dead-reckoned into a PoseGraph."""
    truth = [Pose4()]
    for _ in range(1, n):
        d = Pose4(rng.normal(0, 0.3), (step, rng.normal(0, 0.2), rng.normal(0, 0.05)))
        truth.append(compose(truth[-1], d))
    g = PoseGraph()
    g.insert(0, truth[0])
    edges = []
    for k in range(1, n):
        m = noisy(rng, relative(truth[k - 1], truth[k]), sy, sx)
        g.insert(k, compose(g.global_pose(k - 1), m))
        e = RelEdge(k - 1, k, m, kind=SEQUENTIAL)
        g.add_edge(e)
        edges.append(e)
    added = 0
    while added < n_loops and n > 2:
        i, j = sorted(int(x) for x in rng.choice(n, 2, replace=False))
        if j - i < 2:
            continue
        e = RelEdge(j, i, noisy(rng, relative(truth[j], truth[i]), sy, sx))
        g.add_edge(e)
        edges.append(e)
        added += 1
    return g, edges, truth


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[cid])
