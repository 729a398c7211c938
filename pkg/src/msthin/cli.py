"""Command-line interface.

Usage::

    msthin SUBCOMMAND [--config FILE] [--seed N] [--out DIR] [--method M] [--reps R]
                      [--bootstrap B] [--jobs J] [--data CSV] [--fit JSON] [--set KEY=VALUE ...]

Settings are resolved from, in increasing priority: built-in defaults, the
config file (``key = value`` lines, ``#`` comments), environment variables
``MSTHIN_<KEY>`` (e.g. ``MSTHIN_N=500``), and command-line flags. The
resolved configuration is written to ``config.txt`` in the output
directory, so every run can be repeated from that file alone.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .adjudication import benchmark_adjudication_model
from .benchmark import BenchmarkConfig, run_benchmark, write_benchmark
from .core import DataError, NumericalError, OptimizerConfig, QuadratureConfig
from .delay import DelayModel
from .estimation import StageError, benchmark_spec, bootstrap_fit, classical_fit, misspecified_spec, two_step_fit
from .grid_oe import (discretize, hazard_rate, oe_rates_report, read_csv, reverse_hazard_rate, write_csv,
                      write_rates_report, write_truth_csv)
from .likelihood import BENCHMARK_F, BENCHMARK_THETA, benchmark_event_model, misspecified_event_model
from .reserve import UnsupportedModelError, estimand_grid
from .simulate import (ScenarioConfig, delay_moments, mean_confirmation_probability, naive_view, simulate_dataset,
                       transition_counts)

log = logging.getLogger("msthin")

ENV_PREFIX = "MSTHIN_"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
COMMANDS = ("simulate", "estimate", "bootstrap", "benchmark", "reserve", "oe-rates")


class ConfigError(ValueError):
    pass


def _floats(s):
    return tuple(float(Fraction(v)) if "/" in v else float(v) for v in str(s).replace(" ", "").split(",") if v)


def _strs(s):
    return tuple(v for v in str(s).replace(" ", "").split(",") if v)


def _bool(s):
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _float(s):
    s = str(s).strip()
    return float(Fraction(s)) if "/" in s else float(s)


def _fmt_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(_fmt_value(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


# key: (parser, default, description)
SCHEMA = {
    "n": (int, 1500, "subjects per simulated dataset"),
    "eta": (_float, 5.0, "analysis time (years)"),
    "seed": (int, None, "master seed (required for simulate, benchmark, bootstrap)"),
    "reps": (int, 1, "replications"),
    "first_rep": (int, 0, "index of the first replication"),
    "theta": (_floats, BENCHMARK_THETA, "event hazard parameters (7)"),
    "f": (_floats, BENCHMARK_F, "delay parameters lam13,shape13,beta13,lam23,shape23,beta23"),
    "g": (_floats, (0.8, -1.2), "adjudication parameters g1,g2"),
    "x_min": (_float, -4.0, "covariate lower bound"),
    "x_max": (_float, 4.0, "covariate upper bound"),
    "v_max": (_float, 1.0, "upper bound of the entry time"),
    "delays": (_bool, True, "simulate reporting delays"),
    "adjudication": (_bool, True, "simulate adjudication"),
    "views": (_strs, ("observed", "oracle", "naive1", "naive2"), "dataset views written by simulate"),
    "method": (str, "exact", "estimate/bootstrap method: exact, poisson, naive1, naive2, oracle"),
    "methods": (_strs, ("poisson",), "benchmark methods (comma-separated)"),
    "model": (str, "benchmark", "parametric families: benchmark or misspecified"),
    "bootstrap": (int, 0, "bootstrap resamples B"),
    "levels": (_floats, (0.90, 0.95, 0.99), "confidence levels"),
    "jobs": (int, 1, "worker processes"),
    "data": (str, "", "input CSV (estimate, bootstrap, oe-rates)"),
    "fit": (str, "", "fit JSON from estimate (reserve, oe-rates)"),
    "target": (str, "events", "oe-rates target: events, delays, adjudication"),
    "per_year": (int, 12, "partition buckets per year"),
    "estimand": (_bool, True, "benchmark: compute estimand errors"),
    "x_points": (int, 161, "covariate grid points of the estimand"),
    "step": (_float, 1.0 / 512, "time step of the estimand solver"),
    "horizon": (_float, None, "reserve: end of the time grid (default eta)"),
    "subintervals": (int, 64, "Simpson subintervals per sojourn"),
    "max_iterations": (int, 5000, "Nelder-Mead iteration budget"),
    "tolerance": (_float, 1e-8, "Nelder-Mead tolerance"),
    "restarts": (int, 2, "Nelder-Mead restarts"),
    "initial_state": (int, 1, "initial state of ingested records"),
}


def read_config_file(path) -> dict:
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for i, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{i}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def resolve_config(args, environ=None) -> dict:
    """Defaults < config file < environment < flags; values parsed and validated."""
    environ = os.environ if environ is None else environ
    raw: dict = {}
    if args.config:
        raw.update(read_config_file(args.config))
    for k in SCHEMA:
        env = environ.get(ENV_PREFIX + k.upper())
        if env is not None:
            raw[k] = env
    for k in ("seed", "reps", "bootstrap", "jobs", "data", "fit"):
        v = getattr(args, k, None)
        if v is not None:
            raw[k] = v
    if args.method is not None:
        raw["methods" if args.command == "benchmark" else "method"] = args.method
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        raw[k.strip()] = v.strip()
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = {}
    for k, (parse, default, _) in SCHEMA.items():
        if k in raw and raw[k] != "":
            try:
                cfg[k] = parse(raw[k])
            except (ValueError, ZeroDivisionError) as exc:
                raise ConfigError(f"bad value for {k}: {raw[k]!r} ({exc})") from None
        else:
            cfg[k] = default
    if cfg["jobs"] < 1:
        raise ConfigError("jobs must be at least 1")
    if cfg["reps"] < 1:
        raise ConfigError("reps must be at least 1")
    if args.command in ("simulate", "benchmark", "bootstrap") and cfg["seed"] is None:
        raise ConfigError(f"{args.command} needs a seed (--seed or seed = ...)")
    return cfg


def echo_config(cfg: dict, command: str, out: Path) -> None:
    lines = [f"# msthin {command}"] + [f"{k} = {_fmt_value(cfg[k])}" for k in SCHEMA]
    (out / "config.txt").write_text("\n".join(lines) + "\n")


def scenario(cfg: dict) -> ScenarioConfig:
    try:
        return ScenarioConfig(n=cfg["n"], eta=cfg["eta"], theta=tuple(cfg["theta"]), f=tuple(cfg["f"]),
                              g=tuple(cfg["g"]), x_range=(cfg["x_min"], cfg["x_max"]), v_max=cfg["v_max"],
                              seed=cfg["seed"] or 0, delays=cfg["delays"], adjudication=cfg["adjudication"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def optimizer(cfg) -> OptimizerConfig:
    try:
        return OptimizerConfig(max_iterations=cfg["max_iterations"], tolerance=cfg["tolerance"],
                               restarts=cfg["restarts"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def quadrature(cfg) -> QuadratureConfig:
    try:
        return QuadratureConfig(cfg["subintervals"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def model_spec(cfg):
    if cfg["model"] == "benchmark":
        return benchmark_spec(tuple(cfg["g"]))
    if cfg["model"] == "misspecified":
        return misspecified_spec()
    raise ConfigError(f"unknown model {cfg['model']!r}")


def _load_data(cfg):
    if not cfg["data"]:
        raise ConfigError("this command needs input data (--data or data = ...)")
    path = Path(cfg["data"])
    if not path.exists():
        raise DataError(f"data file not found: {path}")
    return read_csv(path, cfg["eta"], cfg["initial_state"])


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(cfg: dict, out: Path) -> None:
    sc = scenario(cfg)
    views = cfg["views"]
    summaries = []
    for rep in range(cfg["first_rep"], cfg["first_rep"] + cfg["reps"]):
        t0 = time.perf_counter()
        d = out if cfg["reps"] == 1 else out / f"rep_{rep:03d}"
        d.mkdir(parents=True, exist_ok=True)
        truth, data = simulate_dataset(sc, rep, views)
        write_truth_csv(truth, d / "truth.csv")
        for name, ds in data.items():
            write_csv(ds, d / f"{name}.csv")
        xi = [e.xi for r in truth for e in r.events if e.origin == 2]
        decided = [e.track.outcome.value for r in truth for e in r.events if e.track is not None]
        summary = {
            "replication": rep,
            "counts": transition_counts(truth),
            "delay_moments": {k: list(v) for k, v in delay_moments(truth).items()},
            "reported_delay_moments": {k: list(v) for k, v in delay_moments(truth, sc.eta).items()},
            "confirmation": {
                "xi_fraction_2_3": float(np.mean(xi)) if xi else None,
                "confirmed_fraction_by_eta": decided.count("C") / len(decided) if decided else None,
                "mean_long_run_probability": mean_confirmation_probability(sc.g, sc.x_range),
            },
        }
        _write_json(d / "summary.json", summary)
        summaries.append(summary)
        log.info("simulate replication %d: %.2fs", rep, time.perf_counter() - t0)
    if cfg["reps"] > 1:
        counts = {k: float(np.mean([s["counts"][k] for s in summaries])) for k in ("1-2", "1-3", "2-3")}
        _write_json(out / "summary.json", {"reps": cfg["reps"], "mean_counts": counts})


def _fit(cfg, data, method):
    spec = model_spec(cfg)
    opt, quad = optimizer(cfg), quadrature(cfg)
    if method in ("exact", "poisson"):
        return two_step_fit(data, spec, opt, quad, use_exact=method == "exact")
    if method in ("naive1", "naive2"):
        return classical_fit(naive_view(data, method), spec, opt, quad)
    if method == "oracle":
        return classical_fit(data, spec, opt, quad)
    raise ConfigError(f"unknown method {method!r}")


def _fit_json(cfg, fit, method) -> dict:
    out = fit.to_dict()
    out.update(method=method, model=cfg["model"], family_g=list(cfg["g"]))
    return out


def cmd_estimate(cfg: dict, out: Path) -> None:
    data = _load_data(cfg)
    t0 = time.perf_counter()
    fit = _fit(cfg, data, cfg["method"])
    for stage, sec in fit.models.get("timings", {}).items():
        log.info("estimate stage %s: %.2fs", stage, sec)
    log.info("estimate total: %.2fs", time.perf_counter() - t0)
    _write_json(out / "fit.json", _fit_json(cfg, fit, cfg["method"]))


def cmd_bootstrap(cfg: dict, out: Path) -> None:
    if cfg["method"] not in ("exact", "poisson"):
        raise ConfigError("bootstrap supports the exact and poisson methods")
    if cfg["bootstrap"] < 1:
        raise ConfigError("bootstrap needs B >= 1 (--bootstrap)")
    data = _load_data(cfg)
    spec = model_spec(cfg)
    fit = two_step_fit(data, spec, optimizer(cfg), quadrature(cfg), use_exact=cfg["method"] == "exact")
    _write_json(out / "fit.json", _fit_json(cfg, fit, cfg["method"]))
    t0 = time.perf_counter()
    res = bootstrap_fit(data, spec, cfg["bootstrap"], cfg["seed"], optimizer(cfg), quadrature(cfg),
                        use_exact=cfg["method"] == "exact", levels=cfg["levels"], jobs=cfg["jobs"], warm=fit)
    log.info("bootstrap: %d resamples, %d failed, %.2fs", res.B, res.failures, time.perf_counter() - t0)
    res.write(out)


def cmd_benchmark(cfg: dict, out: Path) -> None:
    bc = BenchmarkConfig(scenario=scenario(cfg), reps=cfg["reps"], first_rep=cfg["first_rep"],
                         methods=tuple(cfg["methods"]), model=cfg["model"], estimand=cfg["estimand"],
                         x_points=cfg["x_points"], step=cfg["step"], opt=optimizer(cfg), quad=quadrature(cfg),
                         jobs=cfg["jobs"], bootstrap=cfg["bootstrap"], levels=tuple(cfg["levels"]))
    bad = set(bc.methods) - {"exact", "poisson", "naive1", "naive2", "oracle"}
    if bad:
        raise ConfigError(f"unknown methods: {', '.join(sorted(bad))}")
    t0 = time.perf_counter()
    res = run_benchmark(bc)
    log.info("benchmark: %d replications in %.2fs", bc.reps, time.perf_counter() - t0)
    write_benchmark(bc, res, out)


def _load_fit(cfg) -> dict | None:
    if not cfg["fit"]:
        return None
    path = Path(cfg["fit"])
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read fit {path}: {exc}") from None


def _event_model(cfg, fit):
    g = tuple(fit.get("family_g", cfg["g"])) if fit else tuple(cfg["g"])
    kind = fit.get("model", cfg["model"]) if fit else cfg["model"]
    if kind == "misspecified":
        model = misspecified_event_model()
    else:
        model = benchmark_event_model(tuple(cfg["theta"]), tuple(cfg["f"]), g)
    if fit:
        try:
            model = model.with_vector(fit["blocks"]["theta"])
        except (KeyError, ValueError) as exc:
            raise DataError(f"fit file has no usable theta block: {exc}") from None
    return model


def cmd_reserve(cfg: dict, out: Path) -> None:
    fit = _load_fit(cfg)
    model = _event_model(cfg, fit)
    horizon = cfg["horizon"] if cfg["horizon"] is not None else cfg["eta"]
    t0 = time.perf_counter()
    grid = estimand_grid(model, horizon, cfg["x_points"], (cfg["x_min"], cfg["x_max"]), cfg["step"])
    if not np.all(np.isfinite(grid.values)):
        raise NumericalError("estimand grid contains non-finite values")
    log.info("reserve grid: %.2fs", time.perf_counter() - t0)
    grid.to_csv(out / "estimand.csv")


def _delay_models(f):
    return {(1, 3): DelayModel(f[0], f[1], (f[2],)), (2, 3): DelayModel(f[3], f[4], (f[5],))}


def cmd_oe_rates(cfg: dict, out: Path) -> None:
    data = _load_data(cfg)
    fit = _load_fit(cfg)
    A = max(int(round(cfg["per_year"] * data.eta)), 1)
    partition = np.linspace(0.0, data.eta, A + 1)
    target = cfg["target"]
    rates = {}
    if target == "events":
        table = discretize(data, partition, "events")
        if fit:
            model = _event_model(cfg, fit)
            delays = _delay_models(fit["blocks"]["f"]) if "f" in fit.get("blocks", {}) else {}
            for tr in model.transitions:
                base = hazard_rate(model.hazards[tr], model.params[tr])
                dm = delays.get(tr)
                if dm is None:
                    rates[tr] = base
                else:
                    rates[tr] = (lambda base, dm: lambda t, x: base(t, x) * dm.cdf(
                        np.maximum(data.eta - np.asarray(t), 0.0),
                        np.broadcast_to(np.asarray(x, dtype=float), np.shape(t) + (np.size(x),))))(base, dm)
    elif target == "delays":
        table = discretize(data, partition, "delays", transitions=[(1, 3), (2, 3)])
        if fit and "f" in fit.get("blocks", {}):
            rates = {tr: reverse_hazard_rate(m) for tr, m in _delay_models(fit["blocks"]["f"]).items()}
    elif target == "adjudication":
        table = discretize(data, partition, "adjudication")
        if fit and "g" in fit.get("blocks", {}):
            adj = benchmark_adjudication_model(tuple(fit["blocks"]["g"]))
            rates = {tr: hazard_rate(adj.hazards[tr], adj.params[tr]) for tr in adj.transitions}
    else:
        raise ConfigError(f"unknown target {target!r}")
    write_rates_report(oe_rates_report(table, rates), out / "rates.csv")
    write_rates_report(oe_rates_report(table, rates, aggregate=True), out / "rates_aggregated.csv")


HANDLERS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "bootstrap": cmd_bootstrap,
            "benchmark": cmd_benchmark, "reserve": cmd_reserve, "oe-rates": cmd_oe_rates}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msthin", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"msthin {__version__}")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="msthin-out", help="output directory")
    p.add_argument("--method", help="method (benchmark: comma-separated list)")
    p.add_argument("--reps", type=int)
    p.add_argument("--bootstrap", type=int, help="bootstrap resamples B")
    p.add_argument("--jobs", type=int)
    p.add_argument("--data", help="input CSV")
    p.add_argument("--fit", help="fit JSON written by estimate")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        out = Path(args.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"output directory {out} is not writable: {exc}") from None
        echo_config(cfg, args.command, out)
        HANDLERS[args.command](cfg, out)
    except (ConfigError, UnsupportedModelError) as exc:
        print(f"msthin: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"msthin: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except StageError as exc:
        code = EXIT_DATA if isinstance(exc.cause, DataError) else EXIT_NUMERIC
        print(f"msthin: {exc}", file=sys.stderr)
        return code
    except (NumericalError, FloatingPointError, OverflowError) as exc:
        print(f"msthin: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
