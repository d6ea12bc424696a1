"""Static PR / ROC figures written next to the CSV curves."""

from __future__ import annotations

import os
from typing import Sequence

import matplotlib
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .evaluation import PRPoint, RocPoint

FORMATS = ("svg", "png", "pdf")

_STYLE = {
    "font.size": 10,
    "axes.labelsize": 10,
    "axes.titlesize": 11,
    "legend.fontsize": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    # fixed ids so repeated runs write identical SVG
    "svg.hashsalt": "debrisaug",
}


def _new_figure(width: float = 4.5, height: float = 4.0) -> Figure:
    fig = Figure(figsize=(width, height), dpi=100)
    FigureCanvasAgg(fig)
    return fig


def _save(fig: Figure, path: str) -> str:
    ext = os.path.splitext(path)[1].lstrip(".").lower()
    if ext not in FORMATS:
        raise ValueError(f"unsupported figure format {ext!r}; use one of {FORMATS}")
    metadata = {"svg": {"Date": None}, "pdf": {"CreationDate": None}, "png": {"Software": None}}[ext]
    fig.savefig(path, format=ext, metadata=metadata, bbox_inches="tight")
    return path


def plot_pr_curve(points: Sequence[PRPoint], path: str, label: str = "detector") -> str:
    with matplotlib.rc_context(_STYLE):
        fig = _new_figure()
        ax = fig.add_subplot(1, 1, 1)
        recall = [0.0] + [p.recall for p in points]
        precision = [points[0].precision if points else 1.0] + [p.precision for p in points]
        ax.step(recall, precision, where="post", label=label)
        ax.set_xlim(0.0, 1.0)
        ax.set_ylim(0.0, 1.02)
        ax.set_xlabel("Recall")
        ax.set_ylabel("Precision")
        ax.set_title("Precision-recall")
        ax.legend(loc="lower left")
        return _save(fig, path)


def plot_roc_curve(points: Sequence[RocPoint], path: str, label: str = "detector") -> str:
    """ROC on a log-scaled FPR axis; false-positive rates of interest are tiny."""
    with matplotlib.rc_context(_STYLE):
        fig = _new_figure()
        ax = fig.add_subplot(1, 1, 1)
        pts = sorted((p for p in points if p.tpr is not None), key=lambda p: (p.fpr, p.tpr))
        fpr = [p.fpr for p in pts]
        tpr = [p.tpr for p in pts]
        ax.plot(fpr, tpr, marker=".", markersize=3, label=label)
        positive = [f for f in fpr if f > 0]
        if positive:
            ax.set_xscale("log")
            ax.set_xlim(min(positive) / 2, 1.0)
        ax.set_ylim(0.0, 1.02)
        ax.set_xlabel("False positive rate (per cell)")
        ax.set_ylabel("True positive rate")
        ax.set_title("ROC")
        ax.legend(loc="lower right")
        return _save(fig, path)
