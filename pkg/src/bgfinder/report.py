"""Figures rendered next to run outputs."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _rows(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def plot_ga_stats(stats_csv, out_png) -> Path:
    """Hall-of-fame size and best fitness per generation, one line per signal/profile."""
    rows = _rows(stats_csv)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    groups: dict[tuple[str, str], list[dict]] = {}
    for r in rows:
        groups.setdefault((r["signal"], r["profile"]), []).append(r)
    for (sig, prof), rs in groups.items():
        gen = [int(r["generation"]) for r in rs]
        ax1.plot(gen, [int(r["hof_size"]) for r in rs], label=f"{prof}")
        ax2.plot(gen, [float(r["best_fitness"]) for r in rs])
    ax1.set(xlabel="generation", ylabel="hall of fame size")
    ax2.set(xlabel="generation", ylabel="best fitness")
    if len(groups) <= 12:
        ax1.legend(fontsize=7, title="profile")
    fig.tight_layout()
    fig.savefig(out_png, dpi=100)
    plt.close(fig)
    return Path(out_png)


def plot_metrics(metrics_csv, out_png) -> Path:
    rows = _rows(metrics_csv)
    ep = [int(r["epoch"]) for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for key in ("loss", "policy_loss", "value_loss", "supervised_loss"):
        ax1.plot(ep, [float(r[key]) for r in rows], label=key)
    ax1.set(xlabel="epoch", ylabel="loss")
    ax1.legend(fontsize=7)
    ax2.plot(ep, [int(r["train_recall"]) for r in rows], marker="o", label="training")
    if any(r.get("gen_recall") for r in rows):
        ax2.plot(ep, [int(r["gen_recall"] or 0) for r in rows], marker="s", label="generalisation")
    if rows:
        ax2.axhline(int(rows[-1]["train_oracle"]), ls="--", c="grey", lw=0.8)
    ax2.set(xlabel="epoch", ylabel="relevant backgrounds found")
    ax2.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_png, dpi=100)
    plt.close(fig)
    return Path(out_png)


def plot_recall(report_json, out_png) -> Path:
    data = json.loads(Path(report_json).read_text(encoding="utf-8"))
    sigs = data["signals"]
    fig, ax = plt.subplots(figsize=(max(6, 0.5 * len(sigs)), 4))
    x = range(len(sigs))
    ax.bar(x, [s["oracle"] for s in sigs], color="lightgrey", label="oracle")
    ax.bar(x, [s["recall"] for s in sigs], color="tab:blue", label="found")
    ax.set_xticks(list(x), [str(i + 1) for i in x])
    ax.set(xlabel="signal", ylabel="relevant backgrounds")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=100)
    plt.close(fig)
    return Path(out_png)


def render_dir(run_dir) -> list[Path]:
    """Render every figure whose source file exists in ``run_dir``."""
    d = Path(run_dir)
    out = []
    if (d / "ga_stats.csv").exists():
        out.append(plot_ga_stats(d / "ga_stats.csv", d / "ga_progress.png"))
    if (d / "metrics.csv").exists():
        out.append(plot_metrics(d / "metrics.csv", d / "training_curves.png"))
    if (d / "recall.json").exists():
        out.append(plot_recall(d / "recall.json", d / "recall.png"))
    return out
