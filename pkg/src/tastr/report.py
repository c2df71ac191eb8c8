"""Figures and plot-ready tables for a finished run."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

PROGRESS_COLUMNS = ("iteration", "cmc1", "cmc5", "map", "num_matches", "assoc_precision", "assoc_recall",
                    "train_loss")


def progress_rows(records) -> list[dict]:
    rows = []
    for r in records:
        r = r if isinstance(r, dict) else r.to_dict()
        m = r.get("metrics") or {}
        rows.append({
            "iteration": r["iteration"],
            "cmc1": m.get("cmc1"),
            "cmc5": m.get("cmc5"),
            "map": m.get("map"),
            "num_matches": r.get("num_matches"),
            "assoc_precision": r.get("assoc_precision"),
            "assoc_recall": r.get("assoc_recall"),
            "train_loss": r.get("train_loss"),
        })
    return rows


def write_progress_csv(records, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=PROGRESS_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in progress_rows(records):
            w.writerow({k: "" if v is None else v for k, v in row.items()})


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_cmc(cmc, path, max_rank=20, label=None) -> None:
    n = min(max_rank, len(cmc))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(range(1, n + 1), [100 * c for c in cmc[:n]], marker="o", ms=3, label=label)
    ax.set_xlabel("rank")
    ax.set_ylabel("matching rate (%)")
    ax.set_ylim(0, 100)
    ax.grid(alpha=0.3)
    if label:
        ax.legend()
    _save(fig, path)


def plot_progress(records, path) -> None:
    """Rank-1, mAP and accepted match count against iteration (0 is the within-camera model)."""
    rows = progress_rows(records)
    it = [r["iteration"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for key, label in (("cmc1", "rank-1"), ("map", "mAP")):
        vals = [r[key] for r in rows]
        if all(v is not None for v in vals):
            ax.plot(it, [100 * v for v in vals], marker="o", label=label)
    ax.set_xlabel("iteration")
    ax.set_xticks(it)
    ax.set_ylabel("%")
    ax.grid(alpha=0.3)
    later = [r for r in rows if r["iteration"] > 0]
    if later:
        ax2 = ax.twinx()
        ax2.bar([r["iteration"] for r in later], [r["num_matches"] for r in later], alpha=0.2, color="gray")
        ax2.set_ylabel("accepted matches")
    if ax.lines:
        ax.legend(loc="lower right")
    _save(fig, path)


def plot_association(records, path) -> None:
    rows = [r for r in progress_rows(records) if r["assoc_precision"] is not None]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if rows:
        it = [r["iteration"] for r in rows]
        ax.plot(it, [100 * r["assoc_precision"] for r in rows], marker="o", label="precision")
        ax.plot(it, [100 * r["assoc_recall"] for r in rows], marker="s", label="recall")
        ax.legend()
    ax.set_xlabel("iteration")
    ax.set_ylabel("%")
    ax.set_ylim(0, 100)
    ax.grid(alpha=0.3)
    _save(fig, path)


def write_report(records, cmc, out_dir) -> list[Path]:
    """Write progress.csv and the PNG figures; returns the written paths."""
    out = Path(out_dir)
    paths = [out / "progress.csv", out / "cmc.png", out / "progress.png", out / "association.png"]
    write_progress_csv(records, paths[0])
    if cmc is not None:
        plot_cmc(cmc, paths[1])
    else:
        paths.remove(paths[1])
    plot_progress(records, paths[-2])
    plot_association(records, paths[-1])
    return paths
