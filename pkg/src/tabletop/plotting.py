"""Report figures rendered to files."""

from __future__ import annotations

import textwrap
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .harness import GATES  # noqa: E402

GATE_COLORS = ("#c6dbef", "#6baed6", "#2171b5", "#08306b")


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # no version stamp, so repeated renders stay byte-identical
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata={"Software": None} if path.suffix == ".png" else None)
    plt.close(fig)
    return path


def gate_bars(rows, path, title: str = "Trials passing each gate"):
    """Grouped bars: one group per task, one bar per gate."""
    fig, ax = plt.subplots(figsize=(max(6.0, 1.1 * len(rows) + 2), 4.0))
    x = np.arange(len(rows))
    width = 0.2
    for j, (gate, color) in enumerate(zip(GATES, GATE_COLORS)):
        frac = [r.passed[j] / r.trials if r.trials else 0.0 for r in rows]
        ax.bar(x + (j - 1.5) * width, frac, width, label=f"{gate}% gate", color=color)
    ax.set_xticks(x)
    ax.set_xticklabels([f"{r.category}\n" + textwrap.fill(r.task, 14) for r in rows], fontsize=7)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("fraction of trials")
    ax.set_title(title, pad=22)
    ax.legend(fontsize=8, ncol=4, loc="lower center", bbox_to_anchor=(0.5, 1.0), frameon=False)
    return _save(fig, path)


def ablation_bars(baseline, ablated, path):
    """Fraction passing the 75% and 100% gates with affordance and centroid grasps."""
    fig, axes = plt.subplots(1, 2, figsize=(max(7.0, 1.4 * len(baseline) + 3), 4.0), sharey=True)
    x = np.arange(len(baseline))
    for ax, j in zip(axes, (2, 3)):
        for k, (rows, label, color) in enumerate(((baseline, "affordance", "#2171b5"),
                                                   (ablated, "centroid", "#fd8d3c"))):
            frac = [r.passed[j] / r.trials if r.trials else 0.0 for r in rows]
            ax.bar(x + (k - 0.5) * 0.35, frac, 0.35, label=label, color=color)
        ax.set_title(f"{GATES[j]}% gate")
        ax.set_xticks(x)
        ax.set_xticklabels([textwrap.fill(r.task, 14) for r in baseline], fontsize=7)
        ax.set_ylim(0, 1.05)
    axes[0].set_ylabel("fraction of trials")
    handles, labels = axes[0].get_legend_handles_labels()
    fig.legend(handles, labels, fontsize=8, ncol=2, loc="upper center", bbox_to_anchor=(0.5, 1.04))
    return _save(fig, path)


def grasp_figure(capture, candidates, selected, region_mask, path, title: str = ""):
    """Wrist depth image with candidate scores, the graspable region and the chosen grasp."""
    fig, ax = plt.subplots(figsize=(5.0, 5.0))
    depth = np.where(capture.mask, capture.depth, np.nan)
    ax.imshow(depth, cmap="Greys_r")
    if candidates:
        u = [c.u for c in candidates]
        v = [c.v for c in candidates]
        s = [c.score for c in candidates]
        sc = ax.scatter(u, v, c=s, s=6, cmap="viridis", vmin=0, vmax=1)
        fig.colorbar(sc, ax=ax, fraction=0.046, label="candidate score")
    if region_mask is not None and region_mask.any():
        ax.contour(region_mask.astype(float), levels=[0.5], colors="#e6550d", linewidths=1.2)
    if selected is not None:
        a = np.radians(selected.angle)
        half = 12.0
        # the jaws close across the grasp axis
        du, dv = -np.sin(a) * half, -np.cos(a) * half
        ax.plot([selected.u - du, selected.u + du], [selected.v - dv, selected.v + dv], color="#de2d26", lw=2)
        ax.plot(selected.u, selected.v, "o", color="#de2d26", ms=5)
    ys, xs = np.nonzero(capture.mask)
    pad = 15
    ax.set_xlim(xs.min() - pad, xs.max() + pad)
    ax.set_ylim(ys.max() + pad, ys.min() - pad)
    ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    return _save(fig, path)
