"""Seed fans, ablations, horizon sweeps and the model-error report.

Every run writes a metrics CSV whose bytes depend only on the config and the
seed. Timing and counters go to a separate JSON file so they never disturb
that guarantee.
"""

from __future__ import annotations

import json
import logging
import math
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .controller import EpisodeMetrics, MetaController, tune_allocator

log = logging.getLogger("cmc")

METRICS_VERSION = 1
SMOOTHING_WINDOW = 100
METRIC_COLUMNS = ("episode", "return_ext", "success", "mb_fraction", "mean_e_prd", "mean_LP", "mean_r_int",
                  "steps", "return_smoothed")
METRICS_HEADER = (f"# cmc-metrics v{METRICS_VERSION} smoothing_window={SMOOTHING_WINDOW}\n"
                  + ",".join(METRIC_COLUMNS) + "\n")
AGGREGATE_FIELDS = ("return_ext", "return_smoothed", "success", "mb_fraction", "mean_e_prd")
AGGREGATE_HEADER = (f"# cmc-aggregate v{METRICS_VERSION} smoothing_window={SMOOTHING_WINDOW} std=population\n"
                    + ",".join(["episode", "n_seeds"] + [f"{k}_{s}" for k in AGGREGATE_FIELDS
                                                         for s in ("mean", "std")]) + "\n")
ABLATION_CELLS = (("ddpg", False), ("ddpg", True), ("cacla", False), ("cacla", True))


@dataclass
class RunSummary:
    seed: int
    rows: list[dict]
    smoothed: list[float]
    final_mean: float
    wall_seconds: float
    cpu_seconds: float
    counters: dict = field(default_factory=dict)
    metrics_path: str | None = None


# ---------------------------------------------------------------------- formatting


def fmt(x):
    """Exact, platform-stable text for a float (17 significant digits)."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    return format(x, ".17g")


def smooth(values, window=SMOOTHING_WINDOW):
    """Trailing mean over up to ``window`` episodes (shorter at the start)."""
    out, total = [], 0.0
    vals = [float(v) for v in values]
    for i, v in enumerate(vals):
        total += v
        if i >= window:
            total -= vals[i - window]
        out.append(total / min(i + 1, window))
    return out


def final_return(rows, window):
    """Mean extrinsic return over the last ``window`` episodes."""
    tail = [r["return_ext"] for r in rows[-window:]]
    return float(np.mean(tail)) if tail else math.nan


def metrics_rows(episodes: list[EpisodeMetrics]):
    smoothed = smooth([m.return_ext for m in episodes])
    rows = []
    for m, s in zip(episodes, smoothed):
        rows.append({"episode": m.episode, "return_ext": m.return_ext, "success": m.success,
                     "mb_fraction": m.mb_fraction, "mean_e_prd": m.mean_e_prd, "mean_LP": m.mean_lp,
                     "mean_r_int": m.mean_r_int, "steps": m.steps, "return_smoothed": s})
    return rows


def write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        fh.write(METRICS_HEADER)
        for r in rows:
            fh.write(",".join(fmt(r[c]) for c in METRIC_COLUMNS) + "\n")


def read_metrics(path):
    """Parse a metrics CSV (comment lines skipped) into a list of dicts of floats."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    if not lines:
        raise ValueError(f"{path}: no header")
    cols = lines[0].split(",")
    return [{c: float(v) for c, v in zip(cols, ln.split(","))} for ln in lines[1:]]


# ---------------------------------------------------------------------- runs


def run_single(cfg: RunConfig, seed: int, out_dir=None, progress_every=0) -> RunSummary:
    """One meta-controller run; writes ``metrics_seed{seed}.csv`` and ``run_seed{seed}.json``."""
    tune_allocator()
    cfg = cfg.override(seed=seed)
    out = Path(out_dir) if out_dir is not None else None
    trace_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if cfg.trace:
            trace_path = out / f"trace_seed{seed}.jsonl"
    mc = MetaController(cfg, trace_path=trace_path)
    cpu0 = time.process_time()

    def report(m):
        if progress_every and (m.episode + 1) % progress_every == 0:
            recent = mc.result.episodes[-progress_every:]
            log.info("seed %d episode %d return %.3f success %.2f mb %.2f cpu %.0fs", seed, m.episode + 1,
                     np.mean([e.return_ext for e in recent]), np.mean([e.success for e in recent]),
                     np.mean([e.mb_fraction for e in recent]), time.process_time() - cpu0)

    try:
        result = mc.run(on_episode=report)
    finally:
        mc.close()
    rows = metrics_rows(result.episodes)
    counters = {"planner_invocations": result.planner_invocations, "intrinsic_uses": result.intrinsic_uses,
                "model_updates": result.model_updates, "env_steps": result.env_steps,
                "train_ticks": result.train_ticks}
    summary = RunSummary(seed=seed, rows=rows, smoothed=[r["return_smoothed"] for r in rows],
                         final_mean=final_return(rows, 1000), wall_seconds=result.wall_seconds,
                         cpu_seconds=result.cpu_seconds, counters=counters)
    if out is not None:
        path = out / f"metrics_seed{seed}.csv"
        write_metrics(path, rows)
        summary.metrics_path = str(path)
        info = {"seed": seed, "wall_seconds": result.wall_seconds, "cpu_seconds": result.cpu_seconds,
                "final_mean_1000": summary.final_mean, **counters}
        (out / f"run_seed{seed}.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return summary


def _run_job(args):
    cfg_dict, seed, out_dir, progress_every = args
    try:
        return run_single(RunConfig.from_dict(cfg_dict), seed, out_dir, progress_every), None
    except Exception as exc:  # recorded per seed; other seeds keep going
        return None, {"seed": seed, "error": type(exc).__name__, "message": str(exc)}


def run_experiment(cfg: RunConfig, seeds, out_dir, workers=1, progress_every=0):
    """Run every seed, then write the aggregate CSV and a config snapshot.

    Returns ``(summaries, failures)``; a failing seed is logged in
    ``failures.json`` and does not stop the others.
    """
    seeds = list(seeds)
    if not seeds:
        raise ValueError("at least one seed is required")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    jobs = [(cfg.to_dict(), s, str(out), progress_every) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]
    summaries = [s for s, _ in results if s is not None]
    failures = [f for _, f in results if f is not None]
    if failures:
        (out / "failures.json").write_text(json.dumps(failures, indent=2) + "\n")
        for f in failures:
            log.error("seed %s failed: %s %s", f["seed"], f["error"], f["message"])
    if summaries:
        write_aggregate(out / "aggregate.csv", [s.rows for s in summaries])
    return summaries, failures


def write_aggregate(path, runs):
    """Mean and population std per episode across runs (episodes present in every run)."""
    n = min(len(r) for r in runs)
    with open(path, "w", newline="") as fh:
        fh.write(AGGREGATE_HEADER)
        for i in range(n):
            cells = [fmt(int(runs[0][i]["episode"])), fmt(len(runs))]
            for key in AGGREGATE_FIELDS:
                vals = np.array([r[i][key] for r in runs], dtype=np.float64)
                cells += [fmt(np.mean(vals)), fmt(np.std(vals))]
            fh.write(",".join(cells) + "\n")


def load_runs(run_dir):
    """All per-seed metrics in a directory, keyed by seed."""
    out = {}
    for path in sorted(Path(run_dir).glob("metrics_seed*.csv")):
        out[int(path.stem.removeprefix("metrics_seed"))] = read_metrics(path)
    return out


# ---------------------------------------------------------------------- reports


def cell_name(algo, cmc):
    return f"{algo}_{'cmc' if cmc else 'base'}"


def final_table(run_dirs: dict, window):
    """Per-cell final returns: {name: {"per_seed": [...], "median": m, "mean": m}}."""
    table = {}
    for name, d in run_dirs.items():
        finals = [final_return(rows, window) for _, rows in sorted(load_runs(d).items())]
        table[name] = {"per_seed": finals, "median": statistics.median(finals) if finals else math.nan,
                       "mean": float(np.mean(finals)) if finals else math.nan}
    return table


def ordering(table):
    """Rank cells by median final return, best first; ties keep the given order."""
    names = list(table)
    return sorted(names, key=lambda k: (-table[k]["median"], names.index(k)))


def write_table(path, table, key_name, keys):
    order = ordering(table)
    with open(path, "w", newline="") as fh:
        fh.write(f"# cmc-table v{METRICS_VERSION}\n")
        fh.write(f"{key_name},median_final,mean_final,n_seeds,rank\n")
        for name, key in zip(table, keys):
            row = table[name]
            fh.write(f"{key},{fmt(row['median'])},{fmt(row['mean'])},{len(row['per_seed'])},"
                     f"{order.index(name) + 1}\n")


def ablation_matrix(base: RunConfig, seeds, out_dir, final_window=300, workers=1, progress_every=0,
                    cells=ABLATION_CELLS):
    """{ddpg, cacla} x {cmc off, on}; writes ``ablation.csv`` and returns the table."""
    out = Path(out_dir)
    dirs = {}
    for algo, cmc in cells:
        name = cell_name(algo, cmc)
        dirs[name] = out / name
        run_experiment(base.override(algo=algo, cmc=cmc), seeds, dirs[name], workers, progress_every)
    table = final_table(dirs, final_window)
    write_table(out / "ablation.csv", table, "cell", list(table))
    return table


def horizon_sweep(base: RunConfig, horizons, seeds, out_dir, final_window=300, workers=1, progress_every=0):
    """One experiment per planning horizon; writes ``horizons.csv``."""
    if not base.cmc:
        raise ValueError("a horizon sweep needs cmc enabled")
    out = Path(out_dir)
    dirs = {}
    for h in horizons:
        dirs[f"H{h}"] = out / f"H{h}"
        run_experiment(base.override(horizon=h), seeds, dirs[f"H{h}"], workers, progress_every)
    table = final_table(dirs, final_window)
    write_table(out / "horizons.csv", table, "horizon", list(horizons))
    return table


def normalize_curve(values):
    """Min-max normalize to [0, 1]; a constant series maps to zeros."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = np.nanmin(v), np.nanmax(v)
    if not hi > lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def model_error_curve(runs):
    """Average over runs of each run's min-max normalized per-episode mean model error."""
    curves = []
    for rows in runs:
        if not rows or "mean_e_prd" not in rows[0]:
            raise ValueError("metrics are missing the mean_e_prd column")
        curves.append(normalize_curve([r["mean_e_prd"] for r in rows]))
    n = min(len(c) for c in curves)
    return np.mean([c[:n] for c in curves], axis=0)


def model_error_report(run_dir, out_path=None):
    """Write ``model_error.csv`` (episode, normalized error) for all seeds in ``run_dir``."""
    runs = list(load_runs(run_dir).values())
    if not runs:
        raise ValueError(f"no metrics files in {run_dir}")
    curve = model_error_curve(runs)
    out_path = Path(out_path) if out_path else Path(run_dir) / "model_error.csv"
    with open(out_path, "w", newline="") as fh:
        fh.write(f"# cmc-model-error v{METRICS_VERSION} normalization=min-max-per-run n_runs={len(runs)}\n")
        fh.write("episode,normalized_error\n")
        for i, v in enumerate(curve):
            fh.write(f"{i},{fmt(v)}\n")
    return curve


def early_late_drop(curve, fraction=0.1):
    """Mean of the first ``fraction`` of the curve minus the mean of the last ``fraction``."""
    n = max(1, int(round(len(curve) * fraction)))
    return float(np.mean(curve[:n]) - np.mean(curve[-n:]))


def summary_dict(summary: RunSummary):
    d = asdict(summary)
    d.pop("rows")
    d.pop("smoothed")
    return d
