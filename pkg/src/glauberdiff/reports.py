"""Report writers: delimited outputs plus rendered figures.

Every CLI report path emits machine-readable rows (CSV/JSON) and, when a
figure directory is given, a matching PNG.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def write_csv(path: str | Path, rows: list[dict], fieldnames: list[str] | None = None) -> None:
    if not rows:
        raise ValueError("no rows to write")
    fieldnames = fieldnames or list(rows[0].keys())
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)


def write_json(path: str | Path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def fig_loss_curve(metrics: list[dict], out_png: str | Path) -> None:
    steps = [m["step"] for m in metrics]
    fig, ax1 = plt.subplots(figsize=(7, 4))
    ax1.plot(steps, [m["loss"] for m in metrics], lw=1.0, color="tab:blue")
    ax1.set_xlabel("optimizer step")
    ax1.set_ylabel("loss", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(steps, [m["lr"] for m in metrics], lw=0.8, color="tab:orange", alpha=0.7)
    ax2.set_ylabel("learning rate", color="tab:orange")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def fig_trend_bars(labels: list[str], values: list[float], errors: list[float],
                   ylabel: str, out_png: str | Path, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    x = range(len(labels))
    ax.bar(x, values, yerr=errors, capsize=4, color="tab:blue", alpha=0.85)
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels, rotation=15, ha="right")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def fig_gap_curve(rows: list[dict], out_png: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot([r["step"] for r in rows], [r["gap_kl"] for r in rows], marker="o", ms=3, lw=1)
    ax.set_xlabel("forward step")
    ax.set_ylabel("KL(exact reverse || path-ratio implied)")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def fig_residual_bars(checks: list[dict], out_png: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    names = [c["name"] for c in checks]
    # floor values for log display
    vals = [max(c["value"], 1e-18) for c in checks]
    ax.bar(range(len(names)), vals, color=["tab:green" if c["pass"] else "tab:red" for c in checks])
    for i, c in enumerate(checks):
        ax.axhline(c["threshold"], ls="--", lw=0.5, color="gray")
    ax.set_yscale("log")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("residual")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
