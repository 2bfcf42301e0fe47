"""Run a validated experiment config and persist its outputs."""
from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .. import __version__
from ..flow import BACKEND
from .experiments import PANELS, SUMMARY_COLUMNS, TASKS


class ExperimentFailed(RuntimeError):
    """A task raised; partial outputs were written before this was raised."""

    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


def resolve_threads(threads: int | None) -> int:
    if threads is None:
        env = os.environ.get("IMA_BSS_THREADS")
        threads = int(env) if env else 1
    if threads < 1:
        raise ValueError("thread count must be >= 1")
    return threads


def _cell(v):
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: Path, rows: list[dict], columns: list[str] | None = None) -> None:
    if columns is None:
        columns = []
        for r in rows:
            columns.extend(k for k in r if k not in columns)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r.get(c, "")) for c in columns])


def aggregate(rows: list[dict], columns: list[str]) -> dict:
    """Median and quartiles of each numeric column, per condition."""
    out: dict = {}
    for cond in dict.fromkeys(r["condition"] for r in rows):
        sub = [r for r in rows if r["condition"] == cond]
        stats = {"rows": len(sub)}
        for c in columns:
            vals = np.array([r[c] for r in sub if isinstance(r.get(c), (int, float))], dtype=np.float64)
            if vals.size == 0:
                continue
            q1, med, q3 = np.percentile(vals, [25, 50, 75])
            stats[c] = {"median": float(med), "q1": float(q1), "q3": float(q3)}
        out[cond] = stats
    return out


def run_experiment(cfg: dict, out_dir, threads: int | None = None) -> dict:
    """Execute every (condition, seed) task and write report.json, rows.csv
    and the panel CSVs into ``out_dir``.

    If a task fails the completed rows are still written (status "failed")
    and ``ExperimentFailed`` is raised.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    kind = cfg["kind"]
    tasks = TASKS[kind](cfg)
    order = {t.condition: i for i, t in reversed(list(enumerate(tasks)))}
    n_threads = resolve_threads(threads)
    t0 = time.perf_counter()

    results: dict = {}
    error = None

    def run(t):
        return t, t.run()

    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        futures = [pool.submit(run, t) for t in tasks]
        for fut in futures:
            try:
                t, rows = fut.result()
            except Exception as exc:  # keep going so completed work is flushed
                if error is None:
                    error = f"{type(exc).__name__}: {exc}"
                continue
            results[(t.condition, t.seed)] = rows

    rows = []
    for cond, seed in sorted(results, key=lambda k: (order[k[0]], k[1])):
        for r in results[(cond, seed)]:
            rows.append({"condition": cond, "seed": seed, **r})

    report = {
        "kind": kind,
        "version": __version__,
        "backend": BACKEND,
        "config": cfg,
        "status": "failed" if error else "ok",
        "error": error,
        "n_tasks": len(tasks),
        "n_completed": len(results),
        "aggregates": aggregate(rows, SUMMARY_COLUMNS[kind]),
        "wall_clock_seconds": time.perf_counter() - t0,
        "threads": n_threads,
        "rows": rows,
    }
    write_csv(out / "rows.csv", rows)
    for name, cols in PANELS[kind].items():
        write_csv(out / name, rows, cols)
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    if error:
        raise ExperimentFailed(error, report)
    return report
