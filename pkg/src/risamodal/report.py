"""Result tables (frozen CSV schema), plot-data files and matplotlib figures."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

SCHEMA_VERSION = 1

# column name -> type; order is part of the schema version
RESULT_COLUMNS = {
    "trial_id": int,
    "sweep": str,
    "x": int,
    "method": str,
    "K": int,
    "M": int,
    "error": float,
    "iou": float,
    "visible_error": float,
    "residual": float,
    "outer_iters": float,
    "wall_time": float,
    "predicted": float,
    "seed": int,
}
SUMMARY_COLUMNS = {
    "sweep": str,
    "x": int,
    "method": str,
    "n": int,
    "error_mean": float,
    "error_std": float,
    "iou_mean": float,
    "iou_std": float,
}
METHOD_LABELS = {
    "predictor": "learned predictor",
    "corrmin": "correlation minimization",
    "random": "random configurations",
    "no_completion": "no completion",
    "no_occlusion_update": "V fixed to ones",
}

__all__ = [
    "SCHEMA_VERSION",
    "RESULT_COLUMNS",
    "SUMMARY_COLUMNS",
    "write_table",
    "read_table",
    "write_schema",
    "export_results",
    "plot_sweep",
    "plot_curves",
    "plot_shapes",
]


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_table(rows, path, columns=RESULT_COLUMNS) -> None:
    """CSV with exactly ``columns`` in order; empty rows give a header-only file."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(columns))
        for r in rows:
            missing = [c for c in columns if c not in r]
            if missing:
                raise ValueError(f"row lacks columns {missing}")
            w.writerow([_fmt(columns[c](r[c])) for c in columns])


def read_table(path, columns=RESULT_COLUMNS) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != list(columns):
            raise ValueError(f"{path}: columns {header} do not match schema v{SCHEMA_VERSION}")
        return [{c: columns[c](v) for c, v in zip(columns, row)} for row in reader]


def write_schema(path) -> None:
    def spec(cols):
        return [{"name": c, "type": t.__name__} for c, t in cols.items()]

    Path(path).write_text(json.dumps({"version": SCHEMA_VERSION, "results": spec(RESULT_COLUMNS),
                                      "summary": spec(SUMMARY_COLUMNS)}, indent=2))


def export_results(rows, out_dir, plots: bool = True) -> dict:
    """results.csv, summary.csv, schema.json, per-series plot data and figures.

    Returns a mapping of artifact name to path.
    """
    from .pipeline import summarize

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"results": out / "results.csv", "summary": out / "summary.csv", "schema": out / "schema.json"}
    write_table(rows, paths["results"])
    summary = summarize(rows)
    write_table(summary, paths["summary"], SUMMARY_COLUMNS)
    write_schema(paths["schema"])
    for sweep in sorted({s["sweep"] for s in summary}):
        for method in sorted({s["method"] for s in summary if s["sweep"] == sweep}):
            cells = sorted((s for s in summary if s["sweep"] == sweep and s["method"] == method),
                           key=lambda s: s["x"])
            p = out / f"plotdata_{sweep}_{method}.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["x", "error_mean", "error_std", "n"])
                for c in cells:
                    w.writerow([c["x"], repr(float(c["error_mean"])), repr(float(c["error_std"])), c["n"]])
            paths[f"plotdata_{sweep}_{method}"] = p
        if plots:
            fig = out / f"sweep_{sweep}.png"
            plot_sweep(summary, sweep, fig)
            paths[f"figure_{sweep}"] = fig
    return paths


def plot_sweep(summary, sweep: str, path) -> None:
    """Mean error with std bars per method along the swept parameter."""
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    methods = [m for m in METHOD_LABELS if any(s["method"] == m and s["sweep"] == sweep for s in summary)]
    for m in methods:
        cells = sorted((s for s in summary if s["method"] == m and s["sweep"] == sweep), key=lambda s: s["x"])
        x = [c["x"] ** 2 if sweep == "M" else c["x"] for c in cells]
        ax.errorbar(x, [c["error_mean"] for c in cells], yerr=[c["error_std"] for c in cells],
                    marker="o", ms=4, capsize=2, lw=1.2, label=METHOD_LABELS[m])
    ax.set_xlabel("number of RIS configurations K" if sweep == "K" else "RIS elements M")
    ax.set_ylabel("reconstruction error")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_curves(curves: dict, path, ylabel: str = "loss", logy: bool = True) -> None:
    """One line per named series (e.g. training and validation loss)."""
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    for name, ys in curves.items():
        ax.plot(np.arange(len(ys)), ys, lw=1.2, label=name)
    if logy and all(y > 0 for ys in curves.values() for y in ys if not math.isnan(y)):
        ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_shapes(grid, shapes: dict, path) -> None:
    """Side-by-side voxel renderings of flattened occupancies."""
    n = len(shapes)
    fig = plt.figure(figsize=(3.2 * n, 3.2))
    for i, (name, chi) in enumerate(shapes.items()):
        ax = fig.add_subplot(1, n, i + 1, projection="3d")
        arr = grid.to_array(np.asarray(chi)).astype(bool)
        if arr.any():
            ax.voxels(arr, facecolors="tab:blue", edgecolor="k", linewidth=0.2, alpha=0.8)
        ax.set_title(name, fontsize=9)
        ax.set_xlabel("x")
        ax.set_ylabel("y")
        ax.set_zlabel("z")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
