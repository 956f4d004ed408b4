"""Matplotlib figures for replay reports, written straight to files."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_trajectories(runs, path, title=""):
    """Overlay x-y trajectories; ``runs`` maps a label to ``(keys, poses)``."""
    fig, ax = plt.subplots(figsize=(6, 6))
    for label, (_, poses) in runs.items():
        xy = np.array([[p.x, p.y] for p in poses]).reshape(-1, 2)
        ax.plot(xy[:, 0], xy[:, 1], lw=0.7, label=label)
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    if title:
        ax.set_title(title)
    ax.legend(loc="best", fontsize=8)
    return _save(fig, path)


def plot_event_series(stats_by_method, column, path, ylabel, log=False):
    """Per-event series (e.g. wall time or variable count) for several methods."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for method, stats in stats_by_method.items():
        ev = stats.column("event")
        ax.plot(ev, stats.column(column), ".", ms=2, label=method)
    if log:
        ax.set_yscale("log")
    ax.set_xlabel("loop event")
    ax.set_ylabel(ylabel)
    ax.legend(loc="best", fontsize=8)
    return _save(fig, path)


def plot_rejections(stats, corrupted, path):
    """Accepted vs rejected loops over the replay, with ground-truth corruption marked."""
    fig, ax = plt.subplots(figsize=(7, 2.8))
    bad = set(corrupted)
    rejected = set(stats.rejected)
    for label, pick, mark in (
        ("clean accepted", lambda k: k not in bad and k not in rejected, "."),
        ("clean rejected", lambda k: k not in bad and k in rejected, "x"),
        ("corrupt rejected", lambda k: k in bad and k in rejected, "o"),
        ("corrupt accepted", lambda k: k in bad and k not in rejected, "^"),
    ):
        ev = [e.event for e, k in zip(stats.events, stats.edge_index) if pick(k)]
        if ev:
            ax.plot(ev, np.zeros(len(ev)) + len(ax.lines), mark, ms=3, label=label)
    ax.set_yticks([])
    ax.set_xlabel("loop event")
    ax.legend(loc="upper left", fontsize=7, ncol=2)
    return _save(fig, path)
