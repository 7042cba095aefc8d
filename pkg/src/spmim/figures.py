"""Matplotlib renderings written next to the delimited report files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_loss_curve(records, path) -> None:
    epochs = [r.epoch for r in records]
    losses = [r.mean_loss for r in records]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, losses, marker="o", markersize=3, linewidth=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.set_yscale("log" if min(losses, default=1) > 0 else "linear")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_metrics_bar(mean: dict, std: dict | None, path) -> None:
    names = list(mean)
    values = [mean[m] for m in names]
    errors = [std[m] for m in names] if std else None
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(names, values, yerr=errors, capsize=4, color="#4878a8")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_bench_chart(rows: list[dict], path) -> None:
    ratios = [r["ratio"] for r in rows]
    width = 0.25
    x = np.arange(len(ratios))
    fig, ax = plt.subplots(figsize=(7, 4))
    for offset, key, label in (
        (-width, "dense_ms", "dense"),
        (0.0, "sparse_ms", "sparse (emulation)"),
        (width, "compact_ms", "sparse (compact)"),
    ):
        ax.bar(x + offset, [r[key] for r in rows], width=width, label=label)
    ax.set_xticks(x, [f"{r:.1f}" for r in ratios])
    ax.set_xlabel("mask ratio")
    ax.set_ylabel("forward time (ms, median of 5)")
    ax.legend()
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_qc_histogram(reports, path) -> None:
    fig, axes = plt.subplots(2, 2, figsize=(8, 6))
    panels = (
        ("blur_score", "Laplacian variance"),
        ("contrast_score", "luminance std"),
        ("illumination_score", "mean luminance"),
        ("artifact_score", "saturated fraction"),
    )
    for ax, (attr, label) in zip(axes.ravel(), panels):
        values = [getattr(r, attr) for r in reports]
        ax.hist(values, bins=min(20, max(5, len(values))), color="#4878a8")
        ax.set_xlabel(label)
        ax.set_ylabel("count")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
