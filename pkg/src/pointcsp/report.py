"""Delimited tables and matplotlib figures for run and ablation reports."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

ARM_ORDER = ("baseline", "spd", "csp", "csp_spd")
ARM_LABELS = {"baseline": "baseline", "spd": "+SPD", "csp": "+CSP", "csp_spd": "+CSP +SPD"}

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 120,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "savefig.bbox": "tight",
}


def write_csv(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    if not rows:
        path.write_text("")
        return path
    fields = list(rows[0])
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in fields})
    return path


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss_curves(history: Sequence[dict], path, keys=("loss_total",), window: int = 50) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        steps = np.array([h["step"] for h in history])
        for key in keys:
            vals = np.array([h[key] for h in history], float)
            ax.plot(steps, vals, lw=0.6, alpha=0.4)
            if len(vals) >= window:
                ma = np.convolve(vals, np.ones(window) / window, mode="valid")
                ax.plot(steps[window - 1:], ma, lw=1.4, label=f"{key} ({window}-step mean)")
            else:
                ax.lines[-1].set_label(key)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend()
        return _save(fig, Path(path))


def plot_ablation(rows: Sequence[dict], path, metric: str = "miou") -> Path:
    seeds = sorted({r["corpus_seed"] for r in rows})
    arms = [a for a in ARM_ORDER if any(r["arm"] == a for r in rows)]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        width = 0.8 / max(len(seeds), 1)
        x = np.arange(len(arms))
        for i, s in enumerate(seeds):
            vals = [next((r[metric] for r in rows if r["arm"] == a and r["corpus_seed"] == s), np.nan)
                    for a in arms]
            ax.bar(x + (i - (len(seeds) - 1) / 2) * width, vals, width, label=f"corpus {s}")
        means = [np.nanmean([r[metric] for r in rows if r["arm"] == a]) for a in arms]
        ax.plot(x, means, "k_", ms=22, mew=2, label="mean")
        ax.set_xticks(x, [ARM_LABELS[a] for a in arms])
        ax.set_ylabel(f"linear-probe {metric}")
        lo = np.nanmin([r[metric] for r in rows])
        ax.set_ylim(max(0.0, lo - 0.1), None)
        ax.legend(ncol=2)
        return _save(fig, Path(path))


def plot_batch_sweep(rows: Sequence[dict], path, metric: str = "miou") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for s in sorted({r["corpus_seed"] for r in rows}):
            pts = sorted((r["batch_size"], r[metric]) for r in rows if r["corpus_seed"] == s)
            ax.plot([p[0] for p in pts], [p[1] for p in pts], "o-", label=f"corpus {s}")
        ax.set_xscale("log", base=2)
        ax.set_xlabel("finetune batch size")
        ax.set_ylabel(metric)
        ax.legend()
        return _save(fig, Path(path))


def plot_consistency(rows: Sequence[dict], path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        seeds = [r["corpus_seed"] for r in rows]
        x = np.arange(len(seeds))
        ax.bar(x - 0.2, [r["ratio_plain"] for r in rows], 0.4, label="CSP off")
        ax.bar(x + 0.2, [r["ratio_csp"] for r in rows], 0.4, label="CSP on")
        ax.set_xticks(x, [f"corpus {s}" for s in seeds])
        ax.set_ylabel("intra / inter distance ratio")
        ax.legend()
        return _save(fig, Path(path))


def write_ablation_report(table: dict, root) -> dict[str, Path]:
    root = Path(root)
    out = {
        "json": root / "ablation.json",
        "arms_csv": write_csv(table["arms"], root / "ablation.csv"),
        "sweep_csv": write_csv(table["batch_sweep"], root / "batch_sweep.csv"),
    }
    out["json"].write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    if table["arms"]:
        out["ablation_fig"] = plot_ablation(table["arms"], root / "figures" / "ablation_miou.png")
    if table["batch_sweep"]:
        out["sweep_fig"] = plot_batch_sweep(table["batch_sweep"], root / "figures" / "batch_sweep.png")
    if table.get("consistency"):
        out["consistency_csv"] = write_csv(table["consistency"], root / "consistency.csv")
        out["consistency_fig"] = plot_consistency(table["consistency"], root / "figures" / "consistency.png")
    return out
