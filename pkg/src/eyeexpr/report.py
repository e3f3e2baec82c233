"""Report rendering: delimited metric tables, JSON summaries, and figures.

Every report path writes the per-class CSV and JSON summary alongside a
confusion-matrix heatmap PNG; training writes a loss-curve PNG next to its
trace.  Figures use the Agg backend and fixed metadata so identical inputs
produce identical bytes.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .evaluation import EvaluationReport

_PNG_METADATA = {"Software": "eyeexpr"}


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def write_metrics_csv(report: EvaluationReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "precision", "recall", "f1", "support"])
        for name, p, r, f1, support in report.csv_rows():
            writer.writerow([name, f"{p:.6f}", f"{r:.6f}", f"{f1:.6f}", support])


def write_summary_json(report: EvaluationReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json_obj(), fh, sort_keys=True, indent=2)
        fh.write("\n")


def confusion_figure(report: EvaluationReport, path, title: str = "Confusion matrix") -> None:
    plt = _plt()
    c = len(report.classes)
    conf = report.confusion.astype(np.float64)
    row_sums = conf.sum(axis=1, keepdims=True)
    norm = np.divide(conf, row_sums, out=np.zeros_like(conf), where=row_sums > 0)
    fig, ax = plt.subplots(figsize=(1.2 + 0.6 * c, 1.0 + 0.6 * c), dpi=100)
    im = ax.imshow(norm, cmap="Blues", vmin=0.0, vmax=1.0)
    ax.set_xticks(range(c), report.classes, rotation=45, ha="right", fontsize=7)
    ax.set_yticks(range(c), report.classes, fontsize=7)
    ax.set_xlabel("Predicted")
    ax.set_ylabel("True")
    ax.set_title(f"{title} (acc {report.mean_accuracy:.3f})", fontsize=9)
    if c <= 12:
        for i in range(c):
            for j in range(c):
                ax.text(j, i, str(int(report.confusion[i, j])), ha="center", va="center",
                        fontsize=6, color="black" if norm[i, j] < 0.5 else "white")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_METADATA)
    plt.close(fig)


def loss_curve_figure(trace: list[float], path, title: str = "Training loss") -> None:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 3), dpi=100)
    ax.plot(range(len(trace)), trace, marker="o", markersize=3)
    ax.set_xlabel("Epoch")
    ax.set_ylabel("Mean loss")
    ax.set_title(title, fontsize=10)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_METADATA)
    plt.close(fig)


def write_report_files(report: EvaluationReport, out_dir, stem: str,
                       title: str | None = None) -> list[Path]:
    """CSV + JSON + confusion heatmap for one evaluation report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / f"{stem}.csv", out / f"{stem}.json", out / f"{stem}_confusion.png"]
    write_metrics_csv(report, paths[0])
    write_summary_json(report, paths[1])
    confusion_figure(report, paths[2], title=title or stem)
    return paths
