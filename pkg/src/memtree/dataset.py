"""2D g2o pose graphs lifted to 4-DoF, loop corruption and CSV export."""

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .factors import DEFAULT_COVARIANCE, LOOP, SEQUENTIAL, RelEdge
from .geometry import IDENTITY, Pose4, compose, inverse, wrap_yaw

log = logging.getLogger(__name__)

SIGMA_TUNED = "tuned"
SIGMA_DATASET = "dataset"


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    vertices: list = field(default_factory=list)  # (id, Pose4)
    edges: list = field(default_factory=list)
    name: str = ""

    @property
    def ids(self):
        return [v for v, _ in self.vertices]

    def loop_indices(self):
        return [k for k, e in enumerate(self.edges) if e.kind == LOOP]


def edge_kind(i, j):
    return SEQUENTIAL if abs(i - j) == 1 else LOOP


def _floats(parts, line_no, what):
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        raise DatasetError(f"line {line_no}: malformed {what}") from None
    if not all(math.isfinite(v) for v in vals):
        raise DatasetError(f"line {line_no}: non-finite value in {what}")
    return vals


def _int(tok, line_no):
    try:
        return int(tok)
    except ValueError:
        raise DatasetError(f"line {line_no}: malformed vertex id {tok!r}") from None


def parse_g2o_2d(stream, sigma_mode=SIGMA_TUNED, sigma=DEFAULT_COVARIANCE, name=""):
    """Read ``VERTEX_SE2`` / ``EDGE_SE2`` records from a text stream.

    In ``dataset`` mode the covariance diagonal comes from inverting the
    information diagonal (I11 -> x, I22 -> y, I33 -> yaw); the z slot always
    uses ``sigma``. Vertices missing from the file are dead-reckoned along
    sequential edges from the lowest id.
    """
    if sigma_mode not in (SIGMA_TUNED, SIGMA_DATASET):
        raise ValueError(f"unknown sigma mode {sigma_mode!r}")
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    verts = {}
    edges = []
    for line_no, line in enumerate(stream, 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        tag = parts[0]
        if tag == "VERTEX_SE2":
            if len(parts) != 5:
                raise DatasetError(f"line {line_no}: VERTEX_SE2 needs 4 fields")
            vid = _int(parts[1], line_no)
            x, y, th = _floats(parts[2:], line_no, "VERTEX_SE2")
            if vid in verts:
                raise DatasetError(f"line {line_no}: duplicate vertex {vid}")
            verts[vid] = Pose4(th, (x, y, 0.0))
        elif tag == "EDGE_SE2":
            if len(parts) != 12:
                raise DatasetError(f"line {line_no}: EDGE_SE2 needs 11 fields")
            i, j = _int(parts[1], line_no), _int(parts[2], line_no)
            dx, dy, dth, i11, _, _, i22, _, i33 = _floats(parts[3:], line_no, "EDGE_SE2")
            if sigma_mode == SIGMA_DATASET:
                if min(i11, i22, i33) <= 0:
                    raise DatasetError(f"line {line_no}: information diagonal must be positive")
                cov = (1.0 / i33, 1.0 / i11, 1.0 / i22, sigma[3])
            else:
                cov = tuple(sigma)
            try:
                edges.append(RelEdge(i, j, Pose4(dth, (dx, dy, 0.0)), cov, edge_kind(i, j)))
            except ValueError as exc:
                raise DatasetError(f"line {line_no}: {exc}") from None
        else:
            log.warning("line %d: skipping unsupported record %s", line_no, tag)
    if not verts and edges:
        verts = _dead_reckon(edges)
    elif edges:
        missing = {k for e in edges for k in (e.i, e.j)} - verts.keys()
        if missing:
            raise DatasetError(f"edges reference missing vertices {sorted(missing)[:5]}")
    return Dataset(sorted(verts.items()), edges, name)


def _dead_reckon(edges):
    seq = {}
    for e in edges:
        if e.kind == SEQUENTIAL:
            seq[min(e.i, e.j)] = e
    ids = sorted({k for e in edges for k in (e.i, e.j)})
    out = {ids[0]: IDENTITY}
    for a, b in zip(ids, ids[1:]):
        e = seq.get(a)
        if b != a + 1 or e is None:
            raise DatasetError(f"no sequential edge to dead-reckon vertex {b}")
        m = e.meas if e.i == a else inverse(e.meas)
        out[b] = compose(out[a], m)
    return out


def load_g2o(path, sigma_mode=SIGMA_TUNED, sigma=DEFAULT_COVARIANCE):
    with open(path) as f:
        return parse_g2o_2d(f, sigma_mode, sigma, name=str(path))


def write_g2o(dataset, stream):
    """Write a dataset back out as 2D g2o with diagonal information."""
    for vid, p in dataset.vertices:
        stream.write(f"VERTEX_SE2 {vid} {p.x!r} {p.y!r} {p.yaw!r}\n")
    for e in dataset.edges:
        m = e.meas
        cy, cx, cyy = e.cov[0], e.cov[1], e.cov[2]
        stream.write(
            f"EDGE_SE2 {e.i} {e.j} {m.x!r} {m.y!r} {m.yaw!r} "
            f"{1 / cx!r} 0 0 {1 / cyy!r} 0 {1 / cy!r}\n"
        )


def apply_sigma_mode(dataset, sigma_mode=SIGMA_TUNED, sigma=DEFAULT_COVARIANCE):
    """Re-weight an in-memory dataset the way the parser would.

    ``tuned`` replaces every covariance with ``sigma``; ``dataset`` keeps the
    stored x, y and yaw variances and sets the z slot from ``sigma``.
    """
    if sigma_mode == SIGMA_TUNED:
        edges = [replace(e, cov=tuple(sigma)) for e in dataset.edges]
    elif sigma_mode == SIGMA_DATASET:
        edges = [replace(e, cov=e.cov[:3] + (sigma[3],)) for e in dataset.edges]
    else:
        raise ValueError(f"unknown sigma mode {sigma_mode!r}")
    return Dataset(list(dataset.vertices), edges, dataset.name)


def classify_edges(dataset):
    """Split edges into (sequential, loop) by whether the ids are adjacent."""
    seq, loops = [], []
    for e in dataset.edges:
        (seq if edge_kind(e.i, e.j) == SEQUENTIAL else loops).append(e)
    return seq, loops


def corrupt_loops(dataset, fraction=0.10, seed=0):
    """Add gross noise to a random subset of loop measurements.

    Returns the new dataset and the indices (into ``dataset.edges``) that
    were corrupted. Yaw gets N(0, 1) rad; x and y get N(0, s^2) with s drawn
    from U(1, 50) per edge.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    loops = dataset.loop_indices()
    k = math.floor(fraction * len(loops))
    rng = np.random.default_rng(seed)
    chosen = sorted(int(c) for c in rng.choice(loops, size=k, replace=False)) if k else []
    edges = list(dataset.edges)
    for idx in chosen:
        e = edges[idx]
        s = rng.uniform(1.0, 50.0)
        dyaw = rng.normal(0.0, 1.0)
        dx, dy = rng.normal(0.0, s, size=2)
        m = e.meas
        edges[idx] = replace(e, meas=Pose4(wrap_yaw(m.yaw + dyaw), (m.x + dx, m.y + dy, m.z)))
    return Dataset(list(dataset.vertices), edges, dataset.name), chosen


def _fmt(v):
    s = f"{v:.9g}"
    return "0" if s == "-0" else s


def export_trajectory(keys, poses, stream=None):
    """CSV ``id,x,y,z,yaw`` in key order; returns the text if no stream given."""
    keys, poses = list(keys), list(poses)
    if len(keys) != len(poses):
        raise ValueError("one pose per key required")
    out = stream if stream is not None else io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["id", "x", "y", "z", "yaw"])
    for k, p in sorted(zip(keys, poses), key=lambda kp: kp[0]):
        w.writerow([k, _fmt(p.x), _fmt(p.y), _fmt(p.z), _fmt(p.yaw)])
    return out.getvalue() if stream is None else None


def read_trajectory(stream):
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    r = csv.DictReader(stream)
    keys, poses = [], []
    for row in r:
        keys.append(int(row["id"]))
        poses.append(Pose4(float(row["yaw"]), (float(row["x"]), float(row["y"]), float(row["z"]))))
    return keys, poses
