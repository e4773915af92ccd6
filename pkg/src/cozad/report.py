"""Machine-readable outputs (JSON/CSV) plus rendered figures.

Training and evaluation reports are written as JSON with deterministic byte
layout; CSV files use repr() floats so artifacts diff cleanly. Figures are
rendered with the Agg backend next to the delimited outputs.
"""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .evaluation import ScoreReport
from .meta import TrainReport

_SAVEFIG = {"dpi": 100}


def write_scores_csv(path, image_scores, image_labels=None) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image_index", "image_score", "label"])
        for i, score in enumerate(image_scores):
            label = "" if image_labels is None else int(image_labels[i])
            writer.writerow([i, repr(float(score)), label])


def _fig_train_curves(report: TrainReport, path) -> None:
    epochs = np.arange(report.epochs)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, report.train_loss, label="support loss", color="tab:blue")
    if any(v is not None for v in report.val_loss):
        vals = [np.nan if v is None else v for v in report.val_loss]
        ax.plot(epochs, vals, label="query loss", color="tab:orange")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)


def _fig_uncertainty(report: TrainReport, path) -> None:
    epochs = np.arange(report.epochs)
    fig, ax = plt.subplots(figsize=(6, 4))
    det = [np.nan if v is None else v for v in report.det_sigma]
    ax.plot(epochs, det, label="det(loss covariance)", color="tab:green")
    ax.set_xlabel("epoch")
    ax.set_ylabel("det")
    ax2 = ax.twinx()
    ax2.plot(epochs, report.lambda_reg, label="lambda", color="tab:red")
    ax2.set_ylabel("lambda")
    lines = ax.get_lines() + ax2.get_lines()
    ax.legend(lines, [ln.get_label() for ln in lines], loc="upper right")
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)


def _fig_weight_bands(report: TrainReport, path) -> None:
    epochs = np.arange(report.epochs)
    med = [w["median"] for w in report.weight_stats]
    q25 = [w["q25"] for w in report.weight_stats]
    q75 = [w["q75"] for w in report.weight_stats]
    lo = [w["min"] for w in report.weight_stats]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.fill_between(epochs, q25, q75, alpha=0.3, color="tab:blue", label="quartiles")
    ax.plot(epochs, med, color="tab:blue", label="median weight")
    ax.plot(epochs, lo, color="tab:gray", linestyle="--", label="min weight")
    ax.set_xlabel("epoch")
    ax.set_ylabel("confidence weight")
    ax.set_ylim(-0.05, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)


def write_train_outputs(report: TrainReport, json_path, figures: bool = True) -> list[str]:
    """Write the training report JSON and, by default, its figures."""
    written = [str(json_path)]
    with open(json_path, "wb") as fh:
        fh.write(report.to_json_bytes())
    if figures:
        base, _ = os.path.splitext(str(json_path))
        for name, fn in (
            ("curves", _fig_train_curves),
            ("uncertainty", _fig_uncertainty),
            ("weights", _fig_weight_bands),
        ):
            path = f"{base}_{name}.png"
            fn(report, path)
            written.append(path)
    return written


def _roc_points(scores, labels):
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="mergesort")
    y = np.asarray(labels)[order]
    tp = np.concatenate([[0], np.cumsum(y == 1)])
    fp = np.concatenate([[0], np.cumsum(y == 0)])
    return fp / max(fp[-1], 1), tp / max(tp[-1], 1)


def _fig_score_hist(sr: ScoreReport, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    scores = np.asarray(sr.image_scores)
    if sr.image_labels is not None:
        labels = np.asarray(sr.image_labels)
        ax.hist(scores[labels == 0], bins=20, alpha=0.6, label="normal")
        ax.hist(scores[labels == 1], bins=20, alpha=0.6, label="anomalous")
        ax.legend()
    else:
        ax.hist(scores, bins=20, alpha=0.8)
    ax.set_xlabel("image anomaly score")
    ax.set_ylabel("count")
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)


def _fig_roc(sr: ScoreReport, path) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    fpr, tpr = _roc_points(sr.image_scores, sr.image_labels)
    ax.plot(fpr, tpr, color="tab:blue")
    ax.plot([0, 1], [0, 1], color="tab:gray", linestyle="--", linewidth=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(f"image AUROC = {sr.i_auroc:.4f}")
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)


def write_eval_outputs(
    sr: ScoreReport, json_path, csv_path=None, figures: bool = True
) -> list[str]:
    """Write evaluation JSON (+ optional per-image CSV) and figures."""
    written = [str(json_path)]
    with open(json_path, "wb") as fh:
        fh.write(sr.to_json_bytes())
    if csv_path is not None:
        write_scores_csv(csv_path, sr.image_scores, sr.image_labels)
        written.append(str(csv_path))
    if figures:
        base, _ = os.path.splitext(str(json_path))
        hist_path = f"{base}_scores.png"
        _fig_score_hist(sr, hist_path)
        written.append(hist_path)
        if sr.i_auroc is not None:
            roc_path = f"{base}_roc.png"
            _fig_roc(sr, roc_path)
            written.append(roc_path)
    return written
