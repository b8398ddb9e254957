"""SVG figures for the report command.

Figures are drawn on bare ``Figure`` objects (no pyplot state) and saved
with a fixed hash salt and no date stamp, so the bytes are reproducible.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib
from matplotlib.figure import Figure

STYLE = {
    "svg.hashsalt": "evicvr",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
}
COLORS = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"]


def _save(fig: Figure, path: str | Path) -> None:
    with matplotlib.rc_context(STYLE):
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})


def _bars(ax, labels, means, stds, ylabel, title):
    xs = range(len(labels))
    means = [math.nan if m is None else m for m in means]
    errs = [0.0 if s is None else s for s in stds]
    ax.bar(xs, means, yerr=errs, capsize=3, color=COLORS[: len(labels)], width=0.6)
    ax.set_xticks(list(xs))
    ax.set_xticklabels(labels, rotation=15, ha="right")
    ax.set_ylabel(ylabel)
    ax.set_title(title)


def bar_chart(path, labels, means, stds=None, ylabel="", title="") -> None:
    with matplotlib.rc_context(STYLE):
        fig = Figure(figsize=(5, 3.2))
        ax = fig.add_subplot()
        _bars(ax, labels, means, stds or [None] * len(labels), ylabel, title)
        finite = [m for m in means if m is not None and math.isfinite(m)] or [0.0]
        lo, hi = min(finite), max(finite)
        pad = 0.1 * (hi - lo) if hi > lo else 0.05 * abs(hi) or 0.05
        ax.set_ylim(lo - 2 * pad, hi + 2 * pad)
        fig.tight_layout()
    _save(fig, path)


def bias_figure(path, study: dict) -> None:
    """Teacher non-click log loss bars beside student mean-bias bars."""
    teachers = study["teacher_nonclick_logloss"]
    students = study["student_mean_bias"]
    with matplotlib.rc_context(STYLE):
        fig = Figure(figsize=(8, 3.2))
        left, right = fig.subplots(1, 2)
        _bars(left, list(teachers), [v["mean"] for v in teachers.values()], [v["std"] for v in teachers.values()],
              "log loss", "Teacher log loss, non-click space")
        _bars(right, list(students), [v["mean"] for v in students.values()], [v["std"] for v in students.values()],
              "|mean pCVR - mean true CVR|", "Student CVR mean bias")
        fig.tight_layout()
    _save(fig, path)


def sweep_figure(path, cells: list[dict]) -> None:
    """AUC against the VIE weight, one line per transfer-layer count.

    Each line carries the SVG id ``sweep-K<k>``.
    """
    by_k: dict[int, list[tuple[float, float]]] = {}
    for c in cells:
        auc = math.nan if c["auc"] is None else c["auc"]
        by_k.setdefault(int(c["transfer_layers"]), []).append((c["lambda_i"], auc))
    with matplotlib.rc_context(STYLE):
        fig = Figure(figsize=(5, 3.2))
        ax = fig.add_subplot()
        for i, (k, pts) in enumerate(sorted(by_k.items())):
            pts.sort()
            (line,) = ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", color=COLORS[i % len(COLORS)], label=f"K={k}")
            line.set_gid(f"sweep-K{k}")
        ax.set_xlabel("VIE loss weight")
        ax.set_ylabel("AUC")
        ax.set_title("Sensitivity to VIE weight and transfer layers")
        ax.legend(frameon=False)
        fig.tight_layout()
    _save(fig, path)
