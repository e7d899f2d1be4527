"""Merge run records into comparison tables and plots."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import ContractViolation
from .experiment import METRICS, NA, RUN_RECORD, RunRecord

COLUMNS = ("run", "seed", "scenario", "dirty_cover_ratio", "mask_rate") + METRICS


def _row(run_dir: Path, rec: RunRecord):
    cfg = rec.config or {}
    poison = cfg.get("poison", {})
    row = {"run": run_dir.name, "seed": rec.seed,
           "scenario": cfg.get("train", {}).get("scenario", NA),
           "dirty_cover_ratio": ":".join(str(v) for v in poison.get("dirty_cover_ratio", [])) or NA,
           "mask_rate": poison.get("mask_rate", NA)}
    for k in METRICS:
        v = rec.metrics.get(k, NA)
        row[k] = NA if v is None else v
    return row


def collect(run_dirs):
    if not run_dirs:
        raise ContractViolation("report needs at least one run directory")
    rows = []
    for d in run_dirs:
        d = Path(d)
        p = d / RUN_RECORD
        if not p.is_file():
            raise ContractViolation(f"{d}: no {RUN_RECORD}")
        rec = RunRecord.from_json(json.loads(p.read_text()))
        rows.append((d, rec, _row(d, rec)))
    return rows


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def write_tables(rows, out_dir: Path):
    table = [r for _, _, r in rows]
    with open(out_dir / "report.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COLUMNS)
        w.writeheader()
        w.writerows(table)
    lines = ["| " + " | ".join(COLUMNS) + " |", "|" + "---|" * len(COLUMNS)]
    lines += ["| " + " | ".join(_fmt(r[c]) for c in COLUMNS) + " |" for r in table]
    (out_dir / "report.md").write_text("\n".join(lines) + "\n")
    with open(out_dir / "report.json", "w") as fh:
        json.dump({"version": 1, "columns": list(COLUMNS), "rows": table}, fh, indent=1)
    return table


def excl_by_mask_rate(table):
    """``[(mask_rate, mean Excl)]`` sorted by mask rate, over runs with a numeric Excl."""
    acc = {}
    for r in table:
        if isinstance(r["excl"], (int, float)) and isinstance(r["mask_rate"], (int, float)):
            acc.setdefault(float(r["mask_rate"]), []).append(float(r["excl"]))
    return [(m, float(np.mean(v))) for m, v in sorted(acc.items())]


def plot_mask_sweep(table, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pts = excl_by_mask_rate(table)
    if len(pts) < 2:
        return None
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot([p[0] for p in pts], [100 * p[1] for p in pts], marker="o")
    ax.set_xlabel("mask rate")
    ax.set_ylabel("Excl (%)")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_entropy_histograms(rows, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    panels = []
    for d, _, r in rows:
        p = d / "strip_report.json"
        if p.is_file():
            doc = json.loads(p.read_text())
            if doc.get("clean_entropies") and doc.get("trigger_entropies"):
                panels.append((r["run"], doc))
    if not panels:
        return None
    fig, axes = plt.subplots(1, len(panels), figsize=(3.2 * len(panels), 2.8), squeeze=False)
    for ax, (name, doc) in zip(axes[0], panels):
        edges = doc.get("histogram_edges") or 30
        ax.hist(doc["clean_entropies"], bins=edges, alpha=0.6, density=True, label="clean")
        ax.hist(doc["trigger_entropies"], bins=edges, alpha=0.6, density=True, label="triggered")
        ax.set_title(name, fontsize=9)
        ax.set_xlabel("entropy")
    axes[0][0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def build_report(run_dirs, out_dir):
    """Write ``report.{csv,md,json}`` and the plots; returns the table rows."""
    rows = collect(run_dirs)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = write_tables(rows, out_dir)
    plot_mask_sweep(table, out_dir / "excl_vs_mask_rate.png")
    plot_entropy_histograms(rows, out_dir / "strip_entropy.png")
    return table
