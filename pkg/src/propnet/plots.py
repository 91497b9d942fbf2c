"""Report figures. Everything renders off-screen to files."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
}

METRIC_LABELS = {"dsc": "DSC", "ji": "JI", "sdsc@0.5": "SDSC@0.5", "sdsc@1.0": "SDSC@1.0", "sdsc@2.0": "SDSC@2.0"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def case_boxplot(report, path, title: str = ""):
    from .metrics import metric_columns

    cols = metric_columns(report.tolerances)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.boxplot([report.values(c) for c in cols], showmeans=True)
        ax.set_xticks(range(1, len(cols) + 1), [METRIC_LABELS.get(c, c) for c in cols])
        ax.set_ylim(0, 1.02)
        ax.set_ylabel("score")
        if title:
            ax.set_title(title)
        return _save(fig, path)


def variant_bars(rows: list[dict], path, key: str = "variant"):
    """Grouped bars of mean metrics, one group per ablation variant."""
    metrics = [m for m in METRIC_LABELS if m in rows[0]]
    x = np.arange(len(metrics))
    width = 0.8 / max(len(rows), 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3))
        for i, r in enumerate(rows):
            ax.bar(x + i * width, [r[m] for m in metrics], width, label=str(r[key]))
        ax.set_xticks(x + width * (len(rows) - 1) / 2, [METRIC_LABELS[m] for m in metrics])
        ax.set_ylim(0, 1.0)
        ax.legend(loc="lower right", frameon=False)
        return _save(fig, path)


def deviation_curve(rows: list[dict], path):
    dev = [r["deviation_mm"] for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        for m in ("dsc", "ji", "sdsc@1.0"):
            if m in rows[0]:
                ax.plot(dev, [r[m] for r in rows], marker="o", label=METRIC_LABELS[m])
        ax.set_xlabel("seed slice deviation (mm)")
        ax.set_ylabel("mean score")
        ax.legend(frameon=False)
        return _save(fig, path)


def interval_curve(rows: list[dict], path):
    iv = [r["interval_mm"] for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        ax.plot(iv, [r["dsc"] for r in rows], marker="o", color="C0")
        ax.set_xlabel("propagation interval (mm)")
        ax.set_ylabel("DSC", color="C0")
        ax2 = ax.twinx()
        ax2.plot(iv, [r["seconds_per_volume"] for r in rows], marker="s", color="C1")
        ax2.set_ylabel("s / volume", color="C1")
        ax2.spines["right"].set_visible(True)
        return _save(fig, path)


def training_curves(history: list[dict], path):
    ep = [h["epoch"] for h in history]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(ep, [h.get("total", np.nan) for h in history], label="train loss")
        val = [(h["epoch"], h["val_dsc"]) for h in history if h.get("val_dsc") is not None]
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        if val:
            ax2 = ax.twinx()
            ax2.plot(*zip(*val), marker="o", color="C2", label="val DSC")
            ax2.set_ylabel("validation DSC")
            ax2.set_ylim(0, 1)
            ax2.spines["right"].set_visible(True)
        return _save(fig, path)
