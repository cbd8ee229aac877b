"""Static SVG figures from run tables: accuracy curves, sweep heat tables, bars."""

from __future__ import annotations

import csv
import hashlib
import os

import matplotlib

matplotlib.use("svg")
import matplotlib.pyplot as plt
import numpy as np


class PlotError(Exception):
    pass


def _read_csv(path: str, required: list[str]) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise PlotError(f"empty table: {path}")
    missing = [c for c in required if c not in rows[0]]
    if missing:
        raise PlotError(f"{path} missing columns {missing}")
    return rows


def _save(fig, out_path: str, source: str):
    """Deterministic SVG with the source table's digest embedded as metadata."""
    with open(source, "rb") as f:
        digest = hashlib.sha256(f.read()).hexdigest()
    os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
    fig.savefig(out_path, format="svg", metadata={
        "Date": None, "Creator": f"source sha256:{digest}",
    })
    plt.close(fig)


def plot_accuracy_curves(curves_csv: str, out_path: str, positions=(1, 2, 3, 4, 5, 6)):
    """One panel per eval experience: per-position accuracy vs global epoch,
    with vertical markers at experience boundaries."""
    rows = _read_csv(curves_csv, ["global_epoch", "experience_trained",
                                  "eval_experience", "position", "accuracy"])
    exps = sorted({int(r["eval_experience"]) for r in rows})
    boundaries = {}
    for r in rows:
        boundaries[int(r["experience_trained"])] = max(
            boundaries.get(int(r["experience_trained"]), 0), int(r["global_epoch"]))
    fig, axes = plt.subplots(1, len(exps), figsize=(4.2 * len(exps), 3.2),
                             sharey=True, squeeze=False)
    for ax, ei in zip(axes[0], exps):
        for j in positions:
            pts = sorted(
                (int(r["global_epoch"]), float(r["accuracy"]))
                for r in rows
                if int(r["eval_experience"]) == ei and int(r["position"]) == j
            )
            if pts:
                ks, accs = zip(*pts)
                ax.plot(ks, accs, label=f"$a_{j}$", linewidth=1.0)
        for b in sorted(boundaries.values())[:-1]:
            ax.axvline(b + 0.5, color="grey", linestyle=":", linewidth=0.8)
        ax.set_title(f"test: experience {ei}")
        ax.set_xlabel("global epoch")
        ax.set_ylim(-0.02, 1.02)
    axes[0][0].set_ylabel("accuracy")
    axes[0][-1].legend(fontsize=7, ncol=2)
    fig.tight_layout()
    _save(fig, out_path, curves_csv)


def plot_replay_series(curves_csvs: dict, out_path: str, position: int = 4,
                       eval_experience: int = 1):
    """Experience-1 accuracy vs epoch, one series per replay fraction."""
    if not curves_csvs:
        raise PlotError("no tables given for replay comparison")
    fig, ax = plt.subplots(figsize=(5, 3.2))
    source = None
    for label, path in sorted(curves_csvs.items()):
        source = source or path
        rows = _read_csv(path, ["global_epoch", "eval_experience", "position", "accuracy"])
        pts = sorted(
            (int(r["global_epoch"]), float(r["accuracy"]))
            for r in rows
            if int(r["eval_experience"]) == eval_experience
            and int(r["position"]) == position
        )
        ks, accs = zip(*pts)
        ax.plot(ks, accs, label=f"replay={label}", linewidth=1.0)
    ax.set_xlabel("global epoch")
    ax.set_ylabel(f"$a_{position}$ accuracy, experience {eval_experience}")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, out_path, source)


def plot_sweep_heat(metrics_csv: str, out_path: str, metric: str = "TA",
                    log10: bool = False):
    """Layers x heads heat table of one metric, one panel per model family."""
    rows = _read_csv(metrics_csv, ["model", "cell", metric])
    cells = {}
    for r in rows:
        if not r["cell"]:
            raise PlotError(f"row without a sweep cell in {metrics_csv}")
        L, Hh = (int(v) for v in r["cell"].split("x"))
        cells.setdefault(r["model"], {}).setdefault((L, Hh), []).append(float(r[metric]))
    families = sorted(cells)
    fig, axes = plt.subplots(1, len(families), figsize=(4.4 * len(families), 3.6),
                             squeeze=False)
    for ax, fam in zip(axes[0], families):
        Ls = sorted({k[0] for k in cells[fam]})
        Hs = sorted({k[1] for k in cells[fam]})
        grid = np.full((len(Ls), len(Hs)), np.nan)
        for (L, Hh), vals in cells[fam].items():
            v = float(np.mean(vals))
            grid[Ls.index(L), Hs.index(Hh)] = np.log10(v) if log10 else v
        im = ax.imshow(grid, aspect="auto", origin="lower", cmap="viridis")
        ax.set_xticks(range(len(Hs)), Hs)
        ax.set_yticks(range(len(Ls)), Ls)
        ax.set_xlabel("attention heads")
        ax.set_ylabel("hidden layers")
        label = f"log10({metric})" if log10 else metric
        ax.set_title(f"{fam}: {label}")
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    _save(fig, out_path, metrics_csv)


def plot_metric_bars(metrics_csv: str, out_path: str,
                     metrics=("TA", "GA", "PM_corrected")):
    """Seed-averaged bars per model for a handful of summary metrics."""
    rows = _read_csv(metrics_csv, ["model", *metrics])
    models = sorted({r["model"] for r in rows})
    fig, axes = plt.subplots(1, len(metrics), figsize=(3.2 * len(metrics), 3.0),
                             squeeze=False)
    x = np.arange(len(models))
    for ax, metric in zip(axes[0], metrics):
        means, errs = [], []
        for m in models:
            vals = [float(r[metric]) for r in rows if r["model"] == m]
            means.append(np.mean(vals))
            errs.append(np.std(vals) / np.sqrt(len(vals)) if len(vals) > 1 else 0.0)
        ax.bar(x, means, yerr=errs, capsize=3)
        ax.set_xticks(x, models, rotation=30, ha="right", fontsize=7)
        ax.set_title(metric)
    fig.tight_layout()
    _save(fig, out_path, metrics_csv)
