"""Figure rendering for evaluation reports.

Every report the CLI writes as delimited text gets a matplotlib rendering
saved next to it.  All functions take already-computed rows, draw to an
Agg canvas, and write PNG files.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

__all__ = ["save_bar_figure", "save_ablation_figure", "save_delta_figure",
           "save_training_curve"]


def save_bar_figure(labels: Sequence[str], values: Sequence[float], path: Path,
                    title: str, ylabel: str, ylim=None) -> None:
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(labels)), 3.2))
    ax.bar(range(len(labels)), values, color="#4878d0")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if ylim is not None:
        ax.set_ylim(*ylim)
    for i, v in enumerate(values):
        ax.text(i, v, f"{v:.3f}", ha="center", va="bottom", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_ablation_figure(rungs: Sequence[str], metrics: dict, path: Path) -> None:
    """Grouped bars: one group per objective ladder rung, one bar per task."""
    tasks = list(metrics)
    width = 0.8 / max(len(tasks), 1)
    fig, ax = plt.subplots(figsize=(max(5, 1.6 * len(rungs)), 3.6))
    for t_idx, task in enumerate(tasks):
        xs = [r + t_idx * width for r in range(len(rungs))]
        ax.bar(xs, metrics[task], width=width, label=task)
    ax.set_xticks([r + 0.4 - width / 2 for r in range(len(rungs))])
    ax.set_xticklabels(rungs, rotation=20, ha="right")
    ax.set_ylabel("metric")
    ax.set_title("objective ladder")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_delta_figure(rows: Sequence[tuple], path: Path,
                      metric_name: str = "retrieval accuracy") -> None:
    """Per-language gain over the masked-LM-only baseline.

    `rows` holds (language, parallel pair count, delta); languages are drawn
    sorted by their amount of parallel data, smallest first.
    """
    rows = sorted(rows, key=lambda r: r[1])
    labels = [f"{lang}\n(n={count})" for lang, count, _ in rows]
    deltas = [d for _, _, d in rows]
    fig, ax = plt.subplots(figsize=(max(4, 1.4 * len(rows)), 3.4))
    ax.bar(range(len(rows)), deltas, color="#d65f5f")
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylabel(f"Δ {metric_name}")
    ax.set_title("alignment gain vs. parallel data size")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_training_curve(metrics_path: Path, path: Path) -> None:
    steps, totals, mlms, sas, was = [], [], [], [], []
    with open(metrics_path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            steps.append(rec["step"])
            totals.append(rec["total"])
            mlms.append(rec["mlm"])
            sas.append(rec["sa"])
            was.append(rec["wa"])
    fig, ax = plt.subplots(figsize=(6, 3.4))
    ax.plot(steps, totals, label="total", linewidth=1.2)
    ax.plot(steps, mlms, label="mlm", linewidth=0.8)
    if any(sas):
        ax.plot(steps, sas, label="sa", linewidth=0.8)
    if any(was):
        ax.plot(steps, was, label="wa", linewidth=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
