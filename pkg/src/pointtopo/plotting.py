"""Report figures written straight to files (non-interactive backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps PNG bytes identical between runs
_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def save_gray_png(path, image):
    plt.imsave(path, np.asarray(image, dtype=float), cmap="gray", vmin=0.0, vmax=1.0, metadata=_META)


def plot_trace(trace, path, title="optimization"):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    it = [r.iteration for r in trace.records]
    ax.semilogy(it, np.maximum(trace.losses, 1e-300), ".-", label="loss")
    ax.semilogy(it, np.maximum(trace.best_so_far, 1e-300), "-", label="best so far")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def plot_tilt(series, path, title="tilt angle"):
    """``series`` maps a label to (times, angle)."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, (t, a) in series.items():
        ax.plot(t, a, label=label)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("tilt (rad)")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def plot_tracks(times, positions, path, labels=None, title="tracked particles"):
    """Height of each tracked particle over time; ``positions`` is (T, P, 3)."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for k in range(positions.shape[1]):
        ax.plot(times, positions[:, k, 2], label=None if labels is None else str(labels[k]))
    ax.set_xlabel("time (s)")
    ax.set_ylabel("z (m)")
    ax.set_title(title)
    if labels is not None:
        ax.legend()
    fig.tight_layout()
    _save(fig, path)


def plot_slice(sl, path, title=None):
    fig, ax = plt.subplots(figsize=(4.5, 4))
    u0, u1, v0, v1 = sl.extent
    # flat clouds have a zero-width box along one axis; widen it for display
    if u1 <= u0:
        u0, u1 = u0 - 0.5, u1 + 0.5
    if v1 <= v0:
        v0, v1 = v0 - 0.5, v1 + 0.5
    im = ax.imshow(sl.image, cmap="gray", vmin=0, vmax=1, extent=(u0, u1, v0, v1))
    fig.colorbar(im, ax=ax, label="r")
    ax.set_title(title or f"{sl.axis} = {sl.offset:.4g}")
    fig.tight_layout()
    _save(fig, path)


def plot_gradcheck(report, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    idx = [r[0] for r in report.rows]
    err = [max(r[3], 1e-18) for r in report.rows]
    ax.semilogy(range(len(idx)), err, "o")
    ax.axhline(report.tolerance, color="k", ls="--", label="tolerance")
    ax.set_xticks(range(len(idx)), [str(i) for i in idx], rotation=90, fontsize=6)
    ax.set_xlabel("parameter")
    ax.set_ylabel("relative error")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)
