"""Monte-Carlo benchmark: replicate, fit every method, tabulate bias/SD/RMSE, estimand errors and coverage."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import DataError, NumericalError, OptimizerConfig, QuadratureConfig
from .estimation import StageError, benchmark_spec, bootstrap_fit, fit_method, misspecified_spec, two_step_fit
from .likelihood import benchmark_event_model
from .reserve import DEFAULT_STEP, estimand_error, estimand_grid
from .simulate import ScenarioConfig, simulate_dataset, transition_counts

log = logging.getLogger(__name__)

THETA_NAMES = ("theta1", "theta2", "theta3", "theta4", "theta5", "theta6", "theta7")


@dataclass(frozen=True)
class BenchmarkConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    reps: int = 1
    first_rep: int = 0
    methods: tuple[str, ...] = ("poisson",)
    model: str = "benchmark"
    estimand: bool = True
    x_points: int = 161
    step: float = DEFAULT_STEP
    opt: OptimizerConfig = field(default_factory=OptimizerConfig)
    quad: QuadratureConfig = field(default_factory=QuadratureConfig)
    jobs: int = 1
    bootstrap: int = 0
    levels: tuple[float, ...] = (0.90, 0.95, 0.99)

    def __post_init__(self):
        if self.reps < 1:
            raise ValueError("reps must be at least 1")
        if self.model not in ("benchmark", "misspecified"):
            raise ValueError("model must be 'benchmark' or 'misspecified'")

    def spec(self):
        return benchmark_spec(self.scenario.g) if self.model == "benchmark" else misspecified_spec()


_TRUTH_GRIDS: dict = {}


def truth_grid(cfg: BenchmarkConfig):
    key = (cfg.scenario.theta, cfg.scenario.g, cfg.scenario.eta, cfg.x_points, cfg.step)
    if key not in _TRUTH_GRIDS:
        model = benchmark_event_model(cfg.scenario.theta, cfg.scenario.f, cfg.scenario.g)
        _TRUTH_GRIDS[key] = estimand_grid(model, cfg.scenario.eta, cfg.x_points, step=cfg.step)
    return _TRUTH_GRIDS[key]


def _vec(fit, block):
    v = fit.blocks.get(block)
    return None if v is None else [float(a) for a in v]


def run_replication(cfg: BenchmarkConfig, rep: int) -> dict:
    """Simulate replication ``rep`` and fit every configured method on its views."""
    t0 = time.perf_counter()
    truth, views = simulate_dataset(cfg.scenario, rep)
    out = {"rep": rep, "counts": transition_counts(truth), "methods": {}}
    spec = cfg.spec()
    for m in cfg.methods:
        t1 = time.perf_counter()
        entry = {"converged": False, "error": ""}
        try:
            fit = fit_method(m, views, spec, cfg.opt, cfg.quad)
        except (StageError, NumericalError, DataError, ValueError) as exc:
            entry["error"] = str(exc)
            log.warning("replication %d, %s: %s", rep, m, exc)
            out["methods"][m] = entry
            continue
        entry.update(converged=fit.converged, theta=_vec(fit, "theta"), g=_vec(fit, "g"), f=_vec(fit, "f"))
        if cfg.estimand:
            grid = estimand_grid(fit.models["event"], cfg.scenario.eta, cfg.x_points, step=cfg.step)
            entry["mse"], entry["mae"] = estimand_error(grid, truth_grid(cfg))
        out["methods"][m] = entry
        log.info("replication %d, %s: %.2fs", rep, m, time.perf_counter() - t1)
    log.info("replication %d done in %.2fs", rep, time.perf_counter() - t0)
    return out


def coverage_replication(cfg: BenchmarkConfig, rep: int, coord: int = 6, state: int = 2) -> dict:
    """Exact fit plus bootstrap percentile intervals for one theta coordinate.

    Resamples refit only what the coordinate depends on: the adjudication
    and delay models it uses and the exact likelihood of the coordinate's
    origin state, warm-started at the full-sample fit.
    """
    truth, views = simulate_dataset(cfg.scenario, rep, ("observed",))
    data = views["observed"]
    spec = cfg.spec()
    try:
        fit = two_step_fit(data, spec, cfg.opt, cfg.quad, use_exact=True)
    except (StageError, NumericalError) as exc:
        return {"rep": rep, "error": str(exc)}
    boot = bootstrap_fit(data, spec, cfg.bootstrap, cfg.scenario.seed, cfg.opt, cfg.quad, use_exact=True,
                         levels=cfg.levels, warm=fit, states=(state,), coords=(coord,), stream=(1 << 20, rep))
    true = float(np.asarray(cfg.scenario.theta)[coord])
    res = {"rep": rep, "estimate": float(fit.blocks["theta"][coord]), "failures": boot.failures, "error": ""}
    for lv, iv in boot.intervals.items():
        lo, hi = iv[0]
        res[f"{lv:g}"] = [float(lo), float(hi), bool(lo <= true <= hi)]
    return res


def _map(fn, cfg, reps, jobs):
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, [cfg] * len(reps), reps))
    return [fn(cfg, r) for r in reps]


def run_benchmark(cfg: BenchmarkConfig) -> dict:
    reps = list(range(cfg.first_rep, cfg.first_rep + cfg.reps))
    results = _map(run_replication, cfg, reps, cfg.jobs)
    coverage = _map(coverage_replication, cfg, reps, cfg.jobs) if cfg.bootstrap > 0 else []
    return {"replications": results, "coverage": coverage}


# ---------------------------------------------------------------------------
# summaries


def _stats(values: np.ndarray, truth) -> dict:
    n = values.shape[0]
    mean = values.mean(axis=0) if n else np.full(values.shape[1:], math.nan)
    sd = values.std(axis=0, ddof=1) if n > 1 else np.full(values.shape[1:], math.nan)
    bias = mean - np.asarray(truth)
    rmse = np.sqrt(np.mean((values - np.asarray(truth)) ** 2, axis=0)) if n else np.full(values.shape[1:], math.nan)
    return {"n": n, "mean": mean, "bias": bias, "sd": sd, "rmse": rmse}


def usable(results: Sequence[dict], method: str) -> list[dict]:
    """Converged, error-free fits of ``method``."""
    out = []
    for r in results:
        e = r["methods"].get(method)
        if e and not e["error"] and e["converged"]:
            out.append(e)
    return out


def parameter_table(results: Sequence[dict], method: str, block: str, truth) -> dict:
    rows = [e[block] for e in usable(results, method) if e.get(block) is not None]
    arr = np.array(rows, dtype=float).reshape(len(rows), -1) if rows else np.zeros((0, len(truth)))
    return _stats(arr, truth)


def estimand_table(results: Sequence[dict], method: str) -> dict:
    rows = [(e["mse"], e["mae"]) for e in usable(results, method) if "mse" in e]
    arr = np.array(rows, dtype=float).reshape(-1, 2)
    n = arr.shape[0]
    return {"n": n, "mse": float(arr[:, 0].mean()) if n else math.nan, "mae": float(arr[:, 1].mean()) if n else math.nan,
            "mse_se": float(arr[:, 0].std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan,
            "mae_se": float(arr[:, 1].std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan}


def coverage_table(coverage: Sequence[dict], levels) -> dict:
    ok = [c for c in coverage if not c.get("error")]
    out = {"k": len(ok)}
    for lv in levels:
        hits = [c[f"{lv:g}"][2] for c in ok if f"{lv:g}" in c]
        out[f"{lv:g}"] = float(np.mean(hits)) if hits else math.nan
    return out


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else f"{float(v):.10g}"
    return str(v)


def _write_rows(path: Path, header, rows):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def write_benchmark(cfg: BenchmarkConfig, out: dict, directory) -> None:
    """Estimates, parameter tables (theta and nuisance), estimand errors, coverage and a JSON summary."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    results = out["replications"]
    sc = cfg.scenario
    rows = []
    for r in results:
        for m in cfg.methods:
            e = r["methods"].get(m, {})
            rows.append([r["rep"], m, e.get("converged", False), e.get("error", ""),
                         ";".join(_fmt(v) for v in (e.get("theta") or [])),
                         ";".join(_fmt(v) for v in (e.get("g") or [])),
                         ";".join(_fmt(v) for v in (e.get("f") or [])), e.get("mse"), e.get("mae")])
    _write_rows(d / "estimates.csv", ["rep", "method", "converged", "error", "theta", "g", "f", "mse", "mae"], rows)

    summary = {"reps": cfg.reps, "methods": {}, "counts": {}}
    counts = np.array([[r["counts"][k] for k in ("1-2", "1-3", "2-3")] for r in results], dtype=float)
    summary["counts"] = dict(zip(("1-2", "1-3", "2-3"), counts.mean(axis=0).tolist()))
    t1, nuis, t2 = [], [], []
    for m in cfg.methods:
        failed = sum(1 for r in results if r["methods"].get(m, {}).get("error")
                     or not r["methods"].get(m, {}).get("converged"))
        summary["methods"][m] = {"failures": failed}
        if cfg.model == "benchmark":
            st = parameter_table(results, m, "theta", sc.theta)
            for i, name in enumerate(THETA_NAMES):
                t1.append([m, name, sc.theta[i], st["mean"][i], st["bias"][i], st["sd"][i], st["rmse"][i], st["n"]])
            for block, truth, names in (("g", sc.g, ("g1", "g2")), ("f", sc.f, tuple(f"f{i + 1}" for i in range(6)))):
                if any(u.get(block) for u in usable(results, m)):
                    st = parameter_table(results, m, block, truth)
                    for i, name in enumerate(names):
                        nuis.append([m, name, truth[i], st["mean"][i], st["bias"][i], st["sd"][i], st["rmse"][i],
                                     st["n"]])
        if cfg.estimand:
            et = estimand_table(results, m)
            t2.append([m, et["mse"], et["mae"], et["mse_se"], et["mae_se"], et["n"]])
            summary["methods"][m].update(mse=et["mse"], mae=et["mae"])
    stat_cols = ["method", "parameter", "truth", "mean", "bias", "sd", "rmse", "n"]
    if t1:
        _write_rows(d / "table_theta.csv", stat_cols, t1)
    if nuis:
        _write_rows(d / "table_nuisance.csv", stat_cols, nuis)
    if t2:
        _write_rows(d / "table_estimand.csv", ["method", "mse", "mae", "mse_se", "mae_se", "n"], t2)
    if out.get("coverage"):
        ct = coverage_table(out["coverage"], cfg.levels)
        _write_rows(d / "table_coverage.csv", ["level", "coverage", "k"],
                    [[lv, ct[f"{lv:g}"], ct["k"]] for lv in cfg.levels])
        summary["coverage"] = ct
    (d / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
