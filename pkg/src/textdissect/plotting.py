"""Static SVG figures for run reports."""

from __future__ import annotations

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

logger = logging.getLogger(__name__)

BLUE = "#1f77b4"
ORANGE = "#ff7f0e"
GREEN = "#2ca02c"
RED = "#d62728"
GRAY = "#7f7f7f"

# fixed ids and no timestamp, so identical data gives identical files
_RC = {"svg.hashsalt": "textdissect", "svg.fonttype": "none", "font.size": 9}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_trajectory(records, path, tau_best=None, early_stop_step=None, title=None) -> Path:
    """Target-class score and its moving average against step."""
    scored = [r for r in records if r.score is not None]
    skipped = [r.step for r in records if r.skipped]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6.4, 3.6))
        if scored:
            steps = [r.step for r in scored]
            ax.plot(steps, [r.score for r in scored], color=BLUE, lw=1.2, marker=".", ms=3, label="target score")
            ax.plot(steps, [r.ema for r in scored], color=ORANGE, lw=1.0, ls="--", label="moving average")
            admitted = [r for r in scored if r.admitted_to_p_best]
            if admitted:
                ax.scatter([r.step for r in admitted], [r.score for r in admitted], s=10,
                           color=GREEN, zorder=3, label="admitted")
        if tau_best is not None:
            ax.axhline(tau_best, color=GRAY, lw=0.8, ls=":", label=f"admission threshold ({tau_best:g})")
        for s in skipped:
            ax.axvline(s, color=GRAY, lw=0.5, alpha=0.5)
        if early_stop_step is not None:
            ax.axvline(early_stop_step, color=RED, lw=1.0, label=f"early stop (step {early_stop_step})")
        ax.set_xlabel("step")
        ax.set_ylabel("target-class probability")
        ax.set_ylim(-0.02, 1.02)
        if title:
            ax.set_title(title)
        if scored or tau_best is not None:
            ax.legend(loc="lower right", frameon=False, fontsize=7)
        return _save(fig, path)


def plot_slice_report(report, path, top: int = 15) -> Path:
    """Horizontal bar chart of the most frequent caption descriptors."""
    items = report.ranked_attributes[:top]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5.0, 0.3 * max(len(items), 3) + 1.0))
        if items:
            labels = [t for t, _ in items][::-1]
            counts = [c for _, c in items][::-1]
            ax.barh(labels, counts, color=BLUE)
        else:
            ax.text(0.5, 0.5, "no high-confidence samples", ha="center", va="center", transform=ax.transAxes)
        ax.set_xlabel("frequency")
        ax.set_title(f"class {report.class_id}: {report.total_samples} captioned samples")
        return _save(fig, path)
