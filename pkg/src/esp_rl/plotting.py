"""Matplotlib figures written straight to files (Agg backend, no display)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_LABELS = {"eval_mean_return": "mean eval return", "eval_win_rate": "win rate", "gvf_mse": "GVF MSE"}


def plot_curves(curves: dict, path, title: str = "") -> None:
    """One panel per metric, mean +/- std band per agent; ``curves`` maps agent -> curve rows."""
    metrics = [m for m in _LABELS if any(r["metric"] == m for rows in curves.values() for r in rows)]
    fig, axes = plt.subplots(1, max(len(metrics), 1), figsize=(4.5 * max(len(metrics), 1), 3.6), squeeze=False)
    for ax, metric in zip(axes[0], metrics):
        for agent, rows in curves.items():
            pts = [r for r in rows if r["metric"] == metric]
            if not pts:
                continue
            x = np.array([r["env_steps"] for r in pts])
            m = np.array([r["mean"] for r in pts])
            s = np.array([r["std"] for r in pts])
            ax.plot(x, m, label=agent)
            ax.fill_between(x, m - s, m + s, alpha=0.25)
        ax.set_xlabel("environment steps")
        ax.set_ylabel(_LABELS[metric])
        if metric == "gvf_mse":
            ax.set_yscale("log")
        ax.legend(fontsize=8)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_explanation(e, path, action_names=None) -> None:
    """Side-by-side bars: the two GVF vectors, and the contributions with MSX bars highlighted."""
    names = list(action_names) if action_names else None
    la = names[e.action_a] if names else str(e.action_a)
    lb = names[e.action_b] if names else str(e.action_b)
    n = len(e.feature_names)
    y = np.arange(n)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 0.35 * n + 1.6), sharey=True)
    ax1.barh(y - 0.2, e.gvf_a, height=0.4, label=la)
    ax1.barh(y + 0.2, e.gvf_b, height=0.4, label=lb)
    ax1.set_yticks(y, e.feature_names, fontsize=7)
    ax1.invert_yaxis()
    ax1.set_title("GVF predictions")
    ax1.legend(fontsize=8)
    msx = set(e.msx or [])
    contrib = e.contributions
    colors = ["tab:green" if i in msx else ("tab:blue" if c > 0 else "tab:red") for i, c in enumerate(contrib)]
    ax2.barh(y, contrib, color=colors)
    ax2.axvline(0.0, color="black", linewidth=0.8)
    ax2.set_title(f"contributions, {la} vs {lb} (MSX in green)")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
