"""SVG figures via matplotlib's Agg backend, written deterministically."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {"svg.hashsalt": "logan-lab", "svg.fonttype": "none"}


def _save(fig, path) -> Path:
    path = Path(path)
    with matplotlib.rc_context(_RC):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def scatter_svg(path, samples, centers=None, title: str = "samples") -> Path:
    samples = np.asarray(samples)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(samples[:, 0], samples[:, 1], s=3, alpha=0.5, label="generated")
    if centers is not None:
        c = np.asarray(centers)
        ax.scatter(c[:, 0], c[:, 1], marker="x", color="k", label="modes")
    ax.set_aspect("equal")
    ax.set_title(title)
    ax.legend(loc="upper right", fontsize=7)
    return _save(fig, path)


def curve_svg(path, x, series: dict[str, list], xlabel: str, ylabel: str, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, ys in series.items():
        ax.plot(x, ys, marker="o", label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.legend(fontsize=7)
    return _save(fig, path)


def phase_portrait_svg(path, params, title: str = "trajectory") -> Path:
    """Plot the first two parameter coordinates of a trajectory."""
    p = np.asarray(params)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(p[:, 0], p[:, 1] if p.shape[1] > 1 else np.zeros(len(p)), lw=1)
    ax.scatter([p[0, 0]], [p[0, 1] if p.shape[1] > 1 else 0.0], color="g", label="start")
    ax.scatter([0.0], [0.0], marker="+", color="k", label="origin")
    ax.set_title(title)
    ax.legend(fontsize=7)
    return _save(fig, path)
