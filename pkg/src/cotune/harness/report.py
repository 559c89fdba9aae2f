"""Per-run curves and cross-run comparison tables from run directories."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..metrics import CSV_COLUMNS
from .config import load_config
from .runner import SCHEMA_VERSION, fmt

SERIES = ("loss", "kappa", "kappa_ma", "HS", "HT", "gnormS", "gnormT", "lrS", "lrT")
KAPPA_WINDOW_START = 100
SMOOTH_WINDOW = 50
THRESHOLD_FRACTION = 0.5


class SchemaError(ValueError):
    pass


@dataclass
class LoadedRun:
    name: str
    method: str
    task: str
    seed: int
    columns: dict[str, np.ndarray]


def load_metrics(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_COLUMNS:
            raise SchemaError(f"{path}: unexpected columns {header}")
        rows = list(reader)
    cols = {}
    for j, name in enumerate(header):
        cols[name] = np.array([float(r[j]) if r[j] != "" else np.nan for r in rows])
    return cols


def load_run(run_dir: str | Path) -> LoadedRun:
    run_dir = Path(run_dir)
    try:
        meta = json.loads((run_dir / "run.json").read_text())
    except FileNotFoundError:
        raise SchemaError(f"{run_dir}: not a run directory (no run.json)") from None
    version = meta.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaError(f"{run_dir}: log schema version {version}, this build reads {SCHEMA_VERSION}")
    if meta.get("method") == "bound":
        raise SchemaError(f"{run_dir}: synthetic-objective runs have no balance log")
    config = load_config(run_dir / "config.txt")
    return LoadedRun(name=run_dir.name, method=config.method, task=config.task, seed=config.seed,
                     columns=load_metrics(run_dir / "metrics.csv"))


def kappa_std(columns: dict[str, np.ndarray], start: int = KAPPA_WINDOW_START) -> float:
    """Population standard deviation of kappa over logged steps >= start."""
    k = columns["kappa"][columns["step"] >= start]
    return float(np.std(k)) if len(k) else float("nan")


def smoothed(values: np.ndarray, window: int = SMOOTH_WINDOW) -> np.ndarray:
    """Trailing moving average; the first entries average what is available."""
    c = np.cumsum(np.insert(values, 0, 0.0))
    idx = np.arange(1, len(values) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def steps_to_threshold(runs: list[LoadedRun]) -> list[dict]:
    """Per task: threshold = best smoothed loss + half the gap to the mean step-0 loss."""
    out = []
    for task in sorted({r.task for r in runs}):
        group = [r for r in runs if r.task == task]
        curves = {r.name: smoothed(r.columns["loss"]) for r in group}
        start = float(np.mean([r.columns["loss"][0] for r in group]))
        best = float(min(c.min() for c in curves.values()))
        threshold = best + THRESHOLD_FRACTION * (start - best)
        for r in sorted(group, key=lambda r: r.name):
            hit = np.nonzero(curves[r.name] <= threshold)[0]
            steps = int(r.columns["step"][hit[0]]) if len(hit) else None
            out.append({"run": r.name, "task": task, "method": r.method, "seed": r.seed,
                        "start_loss": start, "best_loss": best, "threshold": threshold, "steps": steps})
    return out


def _write_table(path: Path, rows: list[dict], columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r[c]) for c in columns])


def _plot(path: Path, title: str, lines: list[tuple[str, np.ndarray, np.ndarray]], ylabel: str,
          log_y: bool = False) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "cotune", "svg.fonttype": "path"}):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for label, x, y in lines:
            ax.plot(x, y, label=label, linewidth=0.9)
        ax.set_xlabel("step")
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        if log_y:
            ax.set_yscale("log")
        if len(lines) > 1:
            ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def emit_report(run_dirs, out_dir: str | Path, plots: bool = True) -> dict:
    """Write per-run SVG curves plus std(kappa) and steps-to-threshold tables.

    Returns the summary that is also written to ``summary.json``.
    """
    run_dirs = [Path(d) for d in run_dirs]
    if not run_dirs:
        raise ValueError("emit_report needs at least one run directory")
    runs = sorted((load_run(d) for d in run_dirs), key=lambda r: r.name)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if plots:
        for r in runs:
            rd = out / "runs" / r.name
            rd.mkdir(parents=True, exist_ok=True)
            for s in SERIES:
                _plot(rd / f"{s}.svg", f"{r.name}: {s}", [(s, r.columns["step"], r.columns[s])], s,
                      log_y=s in ("kappa", "kappa_ma"))
        for task in sorted({r.task for r in runs}):
            group = [r for r in runs if r.task == task]
            for s in ("loss", "kappa"):
                lines = [(r.name, r.columns["step"], smoothed(r.columns[s]) if s == "loss" else r.columns[s])
                         for r in group]
                _plot(out / f"compare-{task}-{s}.svg", f"{task}: {s}", lines, s, log_y=s == "kappa")

    std_rows = [{"run": r.name, "task": r.task, "method": r.method, "seed": r.seed,
                 "std_kappa": kappa_std(r.columns)} for r in runs]
    _write_table(out / "kappa_std.csv", std_rows, ("run", "task", "method", "seed", "std_kappa"))

    by_method = []
    for task, method in sorted({(r.task, r.method) for r in runs}):
        vals = [row["std_kappa"] for row in std_rows if row["task"] == task and row["method"] == method]
        by_method.append({"task": task, "method": method, "runs": len(vals),
                          "mean_std_kappa": float(np.mean(vals))})
    _write_table(out / "kappa_std_by_method.csv", by_method, ("task", "method", "runs", "mean_std_kappa"))

    thr = steps_to_threshold(runs)
    _write_table(out / "steps_to_threshold.csv", thr,
                 ("run", "task", "method", "seed", "start_loss", "best_loss", "threshold", "steps"))

    summary = {"schema_version": SCHEMA_VERSION, "kappa_window_start": KAPPA_WINDOW_START,
               "smooth_window": SMOOTH_WINDOW, "kappa_std": std_rows, "kappa_std_by_method": by_method,
               "steps_to_threshold": thr}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
