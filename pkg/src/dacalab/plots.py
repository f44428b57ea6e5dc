"""Figures for run reports. Uses the Agg backend so it works headless."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def rolling(x, window: int):
    """Trailing rolling mean and std; early points use the available prefix."""
    x = np.asarray(x, dtype=np.float64)
    mu = np.empty_like(x)
    sd = np.empty_like(x)
    for i in range(len(x)):
        w = x[max(0, i - window + 1): i + 1]
        mu[i], sd[i] = w.mean(), w.std()
    return mu, sd


def _read(path) -> list[dict]:
    with open(path) as fh:
        return list(csv.DictReader(fh))


def reward_curves(runs: dict[str, str | Path], out_png, window: int = 20) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, path in runs.items():
        rows = _read(path)
        steps = np.array([int(r["step"]) for r in rows])
        mu, sd = rolling([float(r["reward_mean"]) for r in rows], window)
        ax.plot(steps, mu, label=label)
        ax.fill_between(steps, mu - sd, mu + sd, alpha=0.2)
    ax.set_xlabel("outer step")
    ax.set_ylabel(f"reward ({window}-step rolling mean)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def grid_heatmap(grid_csv, out_png, title: str = "") -> Path:
    with open(grid_csv) as fh:
        rows = list(csv.reader(fh))
    head, body = rows[0], rows[1:]
    vals = np.array([[float(v) if v else np.nan for v in r[1:]] for r in body])
    fig, ax = plt.subplots(figsize=(1.2 * len(head) + 1, 0.5 * len(body) + 1.5))
    im = ax.imshow(vals, cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(head) - 1), head[1:], rotation=30, fontsize=8)
    ax.set_yticks(range(len(body)), [r[0] for r in body], fontsize=8)
    ax.set_ylabel(head[0])
    for i in range(vals.shape[0]):
        for j in range(vals.shape[1]):
            if np.isfinite(vals[i, j]):
                ax.text(j, i, f"{vals[i, j]:.3f}", ha="center", va="center", fontsize=7, color="w")
    fig.colorbar(im, ax=ax)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def estimator_vs_k(diag_csv, out_png) -> Path:
    rows = [r for r in _read(diag_csv) if r["estimator"] == "sml"]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for strat in sorted({r["strategy"] for r in rows}):
        sub = [r for r in rows if r["strategy"] == strat]
        ks = sorted({int(r["K"]) for r in sub})
        gap = [np.mean([float(r["abs_gap_to_pseudo"]) for r in sub if int(r["K"]) == k]) for k in ks]
        ax.plot(ks, gap, marker="o", label=strat)
    ax.set_xlabel("K")
    ax.set_ylabel("mean |per-token gap| to leave-one-out")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)
