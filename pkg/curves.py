"""
Curve plots from evaluation and training CSVs.

Inputs are the ``threshold,precision,recall,f_beta`` curve files written
by ``app.py eval`` and the ``epoch,iteration,loss`` logs written by the
training commands.  Every input becomes one labelled series; the merged
tables are written next to the figures so the plots can be redrawn
without this tool.
"""
import logging
import os
from typing import List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from store import CURVE_COLUMNS, LOSS_COLUMNS, read_csv_checked, write_text  # noqa: E402

logger = logging.getLogger(__name__)


def series_label(path: str) -> str:
    """``<parent dir>/<stem>``, e.g. ``finetune/loss``."""
    parent = os.path.basename(os.path.dirname(os.path.abspath(path)))
    stem = os.path.splitext(os.path.basename(path))[0]
    return f"{parent}/{stem}" if parent else stem


def merge_series(paths: Sequence[str], columns: Sequence[str]) -> pd.DataFrame:
    frames = []
    for path in paths:
        frame = read_csv_checked(path, columns)[list(columns)]
        frame.insert(0, "series", series_label(path))
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


def _save(fig, path: str) -> str:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_pr(curves: pd.DataFrame, path: str) -> str:
    fig, ax = plt.subplots(figsize=(5, 5))
    for label, group in curves.groupby("series", sort=False):
        ax.plot(group["recall"], group["precision"], label=label)
    ax.set_xlabel("Recall")
    ax.set_ylabel("Precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower left")
    return _save(fig, path)


def plot_fmeasure(curves: pd.DataFrame, path: str) -> str:
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, group in curves.groupby("series", sort=False):
        ax.plot(group["threshold"], group["f_beta"], label=label)
    ax.set_xlabel("Threshold")
    ax.set_ylabel("F-measure")
    ax.set_xlim(0, 255)
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower left")
    return _save(fig, path)


def plot_loss(losses: pd.DataFrame, path: str) -> str:
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, group in losses.groupby("series", sort=False):
        ax.plot(group["iteration"], group["loss"], label=label, linewidth=1)
    ax.set_xlabel("Iteration")
    ax.set_ylabel("Training loss")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    ax.legend(loc="upper right")
    return _save(fig, path)


def render_curves(report_paths: Sequence[str], loss_paths: Sequence[str], out_dir: str) -> List[str]:
    """Write plots and merged CSVs for the given inputs; return the written paths."""
    if not report_paths and not loss_paths:
        raise ValueError("no curve or loss files given")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if report_paths:
        curves = merge_series(report_paths, CURVE_COLUMNS)
        merged = os.path.join(out_dir, "curves_merged.csv")
        write_text(merged, curves.to_csv(index=False, float_format="%.6f", lineterminator="\n"))
        written += [
            merged,
            plot_pr(curves, os.path.join(out_dir, "pr_curves.png")),
            plot_fmeasure(curves, os.path.join(out_dir, "fmeasure_curves.png")),
        ]
    if loss_paths:
        losses = merge_series(loss_paths, LOSS_COLUMNS)
        merged = os.path.join(out_dir, "loss_merged.csv")
        write_text(merged, losses.to_csv(index=False, float_format="%.6f", lineterminator="\n"))
        written += [merged, plot_loss(losses, os.path.join(out_dir, "loss_curves.png"))]
    for path in written:
        logger.info("wrote %s", path)
    return written
