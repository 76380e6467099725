"""Bar charts rendered next to the tabular reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

COLORS = {"fixed": "#4c72b0", "recursive": "#dd8452", "semantic": "#55a868", "struct": "#c44e52"}

# no timestamp/version metadata, so repeated runs write identical files
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_effectiveness(reports: dict, path, title: str = "Retrieval effectiveness") -> Path:
    strategies = list(reports)
    names = reports[strategies[0]].metric_names
    x = np.arange(len(names))
    width = 0.8 / len(strategies)
    fig, ax = plt.subplots(figsize=(9, 4))
    for i, s in enumerate(strategies):
        means = [reports[s].mean(n) for n in names]
        ax.bar(x + (i - (len(strategies) - 1) / 2) * width, means, width, label=s, color=COLORS.get(s))
    ax.set_xticks(x)
    ax.set_xticklabels(names)
    ax.set_ylim(0, 1)
    ax.set_ylabel("mean score")
    ax.set_title(title)
    ax.legend(frameon=False, ncol=len(strategies))
    return _save(fig, path)


def plot_costs(costs: dict, path) -> Path:
    strategies = list(costs)
    panels = [
        ("total_chunks", "chunks"),
        ("index_bytes", "index size (MB)"),
        ("mean_retrieval_ms", "retrieval time (ms)"),
    ]
    fig, axes = plt.subplots(1, len(panels), figsize=(10, 3.2))
    for ax, (attr, label) in zip(axes, panels):
        vals = [getattr(costs[s], attr) for s in strategies]
        if attr == "index_bytes":
            vals = [v / 1e6 for v in vals]
        ax.bar(strategies, vals, color=[COLORS.get(s) for s in strategies])
        ax.set_title(label)
        ax.tick_params(axis="x", rotation=30)
    return _save(fig, path)
