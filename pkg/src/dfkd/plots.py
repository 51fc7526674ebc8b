"""Matplotlib figures for the report path. Import stays inside this module so
headless use of the library never pulls in a GUI backend."""

from __future__ import annotations

import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

# fixed output metadata keeps PNG bytes identical across re-runs
_META = {"Software": "dfkd"}
_DPI = 110


def _save(fig, path: str) -> str:
    fig.savefig(path, dpi=_DPI, metadata=_META)
    plt.close(fig)
    return os.fspath(path)


def label_histogram(hist, path, title: str = "") -> str:
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    classes = np.arange(hist.counts.size)
    ax.bar(classes, hist.counts, color="#4878a8")
    ax.set_xticks(classes)
    ax.set_xlabel("predicted class")
    ax.set_ylabel("samples")
    ax.set_title(title or f"label distribution: {hist.source}")
    fig.tight_layout()
    return _save(fig, path)


def training_curves(report, path, title: str = "") -> str:
    epochs = [r[0] for r in report.rows]
    losses = [r[1] for r in report.rows]
    accs = [r[2] for r in report.rows]
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    ax.plot(epochs, losses, color="#b4533c", label="loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss", color="#b4533c")
    ax2 = ax.twinx()
    ax2.plot(epochs, accs, color="#3c78b4", label="test accuracy")
    ax2.set_ylabel("test accuracy", color="#3c78b4")
    ax2.set_ylim(0.0, 1.0)
    ax.set_title(title or (report.label or "training run"))
    fig.tight_layout()
    return _save(fig, path)


def accuracy_comparison(records, path) -> str:
    labels = [f"{r.source}\n{'bal' if r.balanced else 'unbal'}"
              f"{'+aug' if r.augmented else ''}" for r in records]
    values = [r.report.final_accuracy for r in records]
    colors = ["#4878a8" if r.balanced else "#b4b4b4" for r in records]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(records) + 1.5), 3.8))
    xs = np.arange(len(records))
    ax.bar(xs, values, color=colors)
    for x, v in zip(xs, values):
        ax.text(x, v, f"{v:.3f}", ha="center", va="bottom", fontsize=8)
    ax.set_xticks(xs)
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("test accuracy")
    ax.set_title("student accuracy by transfer set")
    fig.tight_layout()
    return _save(fig, path)


def class_frequencies(records, path) -> str:
    n = len(records)
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3.2), squeeze=False)
    for ax, rec in zip(axes[0], records):
        fr = rec.histogram.fractions
        ax.bar(np.arange(fr.size), fr,
               color="#4878a8" if rec.balanced else "#b4b4b4")
        ax.set_ylim(0.0, 1.0)
        ax.set_title(f"{rec.source} ({'bal' if rec.balanced else 'unbal'})", fontsize=9)
        ax.set_xlabel("class", fontsize=8)
    axes[0][0].set_ylabel("fraction")
    fig.tight_layout()
    return _save(fig, path)


def distance_vs_accuracy(records, path) -> str:
    fig, ax = plt.subplots(figsize=(5.4, 3.8))
    for rec in records:
        marker = "o" if not rec.distance.approximate else "s"
        ax.scatter(rec.distance.distance, rec.report.final_accuracy, marker=marker,
                   color="#4878a8")
        ax.annotate(rec.source, (rec.distance.distance, rec.report.final_accuracy),
                    textcoords="offset points", xytext=(4, 4), fontsize=8)
    ax.set_xlabel("feature-space Hausdorff distance to the training set")
    ax.set_ylabel("student test accuracy")
    ax.set_title("accuracy usually rises as feature distance falls (square = subsampled)")
    fig.tight_layout()
    return _save(fig, path)
