"""Seeded synthetic pose graphs standing in for the public 2D benchmarks.

``manhattan`` is a random walk on a unit grid with loop closures between
poses that share a cell, in the spirit of the Manhattan-world graphs.
``corridors`` drives a smooth path around a ring of corridors with sparse
loop closures, roughly the size and loop density of the Intel lab graph.
Both return a :class:`~memtree.dataset.Dataset` whose vertices hold the
odometry dead-reckoning guess, plus the ground-truth poses.
"""

import math

import numpy as np

from .dataset import Dataset, edge_kind
from .factors import RelEdge
from .geometry import IDENTITY, Pose4, compose, relative, wrap_yaw

_HEADINGS = (0.0, math.pi / 2, math.pi, -math.pi / 2)
_STEPS = ((1, 0), (0, 1), (-1, 0), (0, -1))


def _noisy(rng, p, sigma_yaw, sigma_xy):
    return Pose4(
        wrap_yaw(p.yaw + rng.normal(0.0, sigma_yaw)),
        (p.x + rng.normal(0.0, sigma_xy), p.y + rng.normal(0.0, sigma_xy), 0.0),
    )


def _assemble(truth, pairs, rng, sigma_yaw, sigma_xy, name):
    cov = (sigma_yaw**2, sigma_xy**2, sigma_xy**2, sigma_xy**2)
    edges = []
    for i, j in pairs:
        m = _noisy(rng, relative(truth[i], truth[j]), sigma_yaw, sigma_xy)
        edges.append(RelEdge(i, j, m, cov, edge_kind(i, j)))
    # dead reckoning from the sequential edges
    guess = [IDENTITY]
    seq = [e for e in edges if e.kind != "loop"]
    for e in seq:
        guess.append(compose(guess[-1], e.meas))
    verts = list(enumerate(guess))
    return Dataset(verts, edges, name), truth


def manhattan(n=3500, seed=0, half_width=20, turn_prob=0.3, loop_prob=0.5,
              sigma_yaw=0.02, sigma_xy=0.05):
    """Grid random walk; each step may close loops to earlier poses in the same cell."""
    rng = np.random.default_rng(seed)
    cell = (0, 0)
    heading = 0
    truth = [IDENTITY]
    visits = {cell: [0]}
    pairs = []
    for k in range(1, n):
        if rng.random() < turn_prob:
            heading = (heading + rng.choice((1, -1))) % 4
        for _ in range(4):
            dx, dy = _STEPS[heading]
            nxt = (cell[0] + dx, cell[1] + dy)
            if max(abs(nxt[0]), abs(nxt[1])) <= half_width:
                break
            heading = (heading + rng.choice((1, -1, 2))) % 4
        cell = nxt
        truth.append(Pose4(_HEADINGS[heading], (float(cell[0]), float(cell[1]), 0.0)))
        pairs.append((k - 1, k))
        for old in visits.get(cell, ()):
            if old < k - 1 and rng.random() < loop_prob:
                pairs.append((k, old))
        visits.setdefault(cell, []).append(k)
    return _assemble(truth, pairs, rng, sigma_yaw, sigma_xy, f"manhattan-{n}-s{seed}")


def corridors(n=1228, seed=0, size=(30.0, 18.0), step=0.45, loop_radius=1.0,
              loop_gap=40, loop_prob=0.08, sigma_yaw=0.02, sigma_xy=0.05):
    """Smooth laps around a rectangular corridor ring with occasional U-turns."""
    rng = np.random.default_rng(seed)
    w, h = size
    perim = 2 * (w + h)

    def on_ring(s):
        s %= perim
        if s < w:
            return s, 0.0, 0.0
        if s < w + h:
            return w, s - w, math.pi / 2
        if s < 2 * w + h:
            return w - (s - w - h), h, math.pi
        return 0.0, h - (s - 2 * w - h), -math.pi / 2

    s, direction = 0.0, 1
    truth = []
    for _ in range(n):
        x, y, yaw = on_ring(s)
        if direction < 0:
            yaw = wrap_yaw(yaw + math.pi)
        lateral = 0.3 * math.sin(0.37 * s) + rng.normal(0.0, 0.05)
        truth.append(Pose4(wrap_yaw(yaw + rng.normal(0.0, 0.05)),
                           (x - math.sin(yaw) * lateral, y + math.cos(yaw) * lateral, 0.0)))
        if rng.random() < 0.004:
            direction = -direction
        s += direction * step * (1.0 + 0.2 * rng.standard_normal())
    pos = np.array([[p.x, p.y] for p in truth])
    pairs = [(k - 1, k) for k in range(1, n)]
    for k in range(loop_gap, n):
        d = np.hypot(*(pos[: k - loop_gap] - pos[k]).T)
        near = np.nonzero(d < loop_radius)[0]
        if len(near) and rng.random() < loop_prob * len(near) ** 0.5:
            pairs.append((k, int(rng.choice(near))))
    return _assemble(truth, pairs, rng, sigma_yaw, sigma_xy, f"corridors-{n}-s{seed}")


SURROGATES = {"manhattan": manhattan, "corridors": corridors}
