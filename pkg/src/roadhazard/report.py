"""Sweep reports: delimited output plus rendered figures.

CSV rows round-trip exactly (floats written with repr); figures are drawn
with matplotlib and saved as 800x600 SVG with deterministic content.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import RocPoint, SweepResult  # noqa: E402

plt.rcParams["svg.hashsalt"] = "roadhazard"


class IoFailure(OSError):
    """Report files could not be written."""


def config_hash(config: dict) -> str:
    payload = json.dumps(config, sort_keys=True, default=str)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]


def write_sweep_csv(result: SweepResult, path) -> None:
    """One row per sweep point: config hash, config JSON, rates."""
    rows = []
    for p in result.points:
        rows.append({
            "config_hash": config_hash(p.config),
            "config": json.dumps(p.config, sort_keys=True),
            "fpr": repr(p.fpr),
            "tpr": repr(p.tpr),
        })
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=["config_hash", "config", "fpr", "tpr"])
            writer.writeheader()
            writer.writerows(rows)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def read_sweep_csv(path) -> SweepResult:
    points = []
    with open(path, "r", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            points.append(RocPoint(fpr=float(row["fpr"]), tpr=float(row["tpr"]),
                                   config=json.loads(row["config"])))
    from .evaluation import roc_hull

    hull = roc_hull(points) if points else []
    return SweepResult(points=points, hull=hull)


def plot_roc(result: SweepResult, path, title: str = "Pixel-level ROC") -> None:
    """Scatter of sweep points with the convex-hull polyline, saved as SVG."""
    fig, ax = plt.subplots(figsize=(800 / 72, 600 / 72))
    if result.points:
        ax.scatter([p.fpr for p in result.points], [p.tpr for p in result.points],
                   s=18, color="tab:blue", label="configurations", zorder=3)
    if result.hull:
        ax.plot([p[0] for p in result.hull], [p[1] for p in result.hull],
                color="tab:red", lw=1.5, label="convex hull", zorder=2)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(title)
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right")
    try:
        fig.savefig(path, format="svg", metadata={"Date": None})
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    finally:
        plt.close(fig)


def plot_instance_curve(points, path, title: str = "Instance-level coverage") -> None:
    """iInt over FP/frame curve for mid-level results, saved as SVG."""
    fig, ax = plt.subplots(figsize=(800 / 72, 600 / 72))
    if points:
        xs = [p[0] for p in points]
        ys = [p[1] for p in points]
        order = sorted(range(len(xs)), key=lambda i: xs[i])
        ax.plot([xs[i] for i in order], [ys[i] for i in order],
                marker="o", ms=4, color="tab:green")
    ax.set_xlabel("false positive stixels per frame")
    ax.set_ylabel("mean instance intersection")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    try:
        fig.savefig(path, format="svg", metadata={"Date": None})
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    finally:
        plt.close(fig)


def emit_report(result: SweepResult, out_dir) -> dict:
    """Write sweep.csv and roc.svg under out_dir; returns the file map."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "sweep.csv"
    svg_path = out / "roc.svg"
    write_sweep_csv(result, csv_path)
    plot_roc(result, svg_path)
    return {"csv": str(csv_path), "svg": str(svg_path)}
