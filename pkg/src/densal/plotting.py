"""Figures written next to the CSV reports (Agg backend, PNG files)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 120,
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "savefig.bbox": "tight",
}

COLORS = {"active": "#c0392b", "naive": "#7f8c8d", "manual": "#2c7fb8",
          "ensemble": "#c0392b", "mc_dropout": "#2c7fb8"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_strategy_mae(report, path) -> Path:
    """MAE vs budget per strategy, std error bars for repeated strategies."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        budgets = np.array(report.budgets)
        for strat, per in report.mae.items():
            mean = np.array([np.mean(per[b]) for b in report.budgets])
            std = np.array([np.std(per[b]) for b in report.budgets])
            ax.errorbar(budgets, mean, yerr=std if std.any() else None, marker="o", ms=4,
                        capsize=3, label=strat, color=COLORS.get(strat))
        ax.axhline(report.base_mae, ls="--", lw=0.8, color="k", label="base only")
        ax.set_xlabel("annotation budget (blocks)")
        ax.set_ylabel("MAE (trees/ha)")
        ax.legend()
        return _save(fig, path)


def plot_calibration(curves: dict, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for method, curve in curves.items():
            p, m = zip(*curve)
            ax.plot(p, m, marker=".", label=method, color=COLORS.get(method))
        ax.set_xlabel("uncertainty percentile kept")
        ax.set_ylabel("retained MSE")
        ax.legend()
        return _save(fig, path)


def plot_selection(coords, scores, selected_xy, path) -> Path:
    """Region centres coloured by g with the selected batch marked."""
    coords = np.asarray(coords)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 4.0))
        sc = ax.scatter(coords[:, 0] / 1000, coords[:, 1] / 1000, c=scores, s=8, cmap="viridis")
        if len(selected_xy):
            sel = np.asarray(selected_xy)
            ax.scatter(sel[:, 0] / 1000, sel[:, 1] / 1000, s=40, facecolors="none",
                       edgecolors="#c0392b", linewidths=1.2, label="selected")
            ax.legend(loc="upper right")
        fig.colorbar(sc, ax=ax, label="g")
        ax.set_xlabel("x (km)")
        ax.set_ylabel("y (km)")
        ax.set_aspect("equal")
        return _save(fig, path)
