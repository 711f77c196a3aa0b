"""Static figures written next to the CSV outputs (``--plot``)."""

from __future__ import annotations

import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
from matplotlib.backends.backend_agg import FigureCanvasAgg  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402
import numpy as np  # noqa: E402


def _figure(figsize=(5.0, 3.6)):
    fig = Figure(figsize=figsize, dpi=110)
    FigureCanvasAgg(fig)
    return fig, fig.add_subplot(111)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.stem}.{os.getpid()}.tmp{path.suffix}")
    fig.tight_layout()
    fig.savefig(tmp)
    os.replace(tmp, path)
    return path


def plot_curves(records, path, title: str = ""):
    """Mean probability curves; the legend carries each curve's nAUC."""
    fig, ax = _figure()
    for rec in records:
        label = f"{rec.method or rec.mode} (nAUC {rec.nauc.value:.2f})"
        ax.plot(rec.fractions, rec.mean_prob, label=label, lw=1.6)
    ax.set_xlabel("fraction of tokens " + ("inserted" if records and records[0].mode == "insertion" else "deleted"))
    ax.set_ylabel("probability of predicted class")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8, frameon=False)
    if title:
        ax.set_title(title, fontsize=10)
    return _save(fig, path)


def plot_layer_profile(signed, absolute, path):
    signed = np.asarray(signed)
    absolute = np.asarray(absolute)
    fig, ax = _figure()
    x = np.arange(len(signed))
    ax.bar(x - 0.2, absolute, width=0.4, label="absolute")
    ax.bar(x + 0.2, signed, width=0.4, label="signed")
    ax.axhline(0, color="k", lw=0.6)
    ax.set_xticks(x)
    ax.set_xlabel("layer")
    ax.set_ylabel("contribution to class logit")
    ax.legend(fontsize=8, frameon=False)
    return _save(fig, path)


def plot_ablation(rows, path, title: str = ""):
    fig, ax = _figure((6.0, 3.6))
    names = [r[0] for r in rows]
    acc = [r[1] for r in rows]
    ax.plot(range(len(acc)), acc, marker="o")
    ax.set_xticks(range(len(acc)))
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=7)
    ax.set_ylim(0, 1.02)
    ax.set_ylabel("top-1 accuracy")
    ax.grid(alpha=0.3)
    if title:
        ax.set_title(title, fontsize=10)
    return _save(fig, path)


def plot_sanity(report, path):
    fig, ax = _figure((6.0, 3.6))
    x = np.arange(len(report.stages))
    ax.plot(x, report.spearman, marker="o", label="|Spearman|")
    ax.plot(x, report.pearson, marker="s", label="|Pearson|")
    ax.set_xticks(x)
    ax.set_xticklabels(report.stages, rotation=45, ha="right", fontsize=7)
    ax.set_ylim(0, 1.02)
    ax.set_ylabel("correlation with original map")
    ax.legend(fontsize=8, frameon=False)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_training(history, path):
    fig, ax = _figure()
    epochs = [h.epoch for h in history]
    ax.plot(epochs, [h.train_loss for h in history], label="train loss", color="C0")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss")
    ax2 = ax.twinx()
    ax2.plot(epochs, [h.eval_acc for h in history], label="eval top-1", color="C1")
    ax2.set_ylim(0, 1.02)
    ax2.set_ylabel("eval top-1")
    return _save(fig, path)


def plot_saliency(grid_map, path, image=None):
    fig, ax = _figure((4.0, 4.0))
    if image is not None:
        ax.imshow(image, extent=(0, 1, 1, 0))
        ax.imshow(grid_map, cmap="jet", alpha=0.5, extent=(0, 1, 1, 0), interpolation="nearest")
    else:
        ax.imshow(grid_map, cmap="jet", interpolation="nearest")
    ax.set_axis_off()
    return _save(fig, path)
