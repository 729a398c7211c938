"""Two-step estimation (g -> f -> theta), naive/oracle fits and the subject bootstrap.

Stage order: the adjudication model is fitted first, its absorption
probabilities give the imputation weights ``w(1, Z; g)`` for a pending last
event, the delay model is fitted with these weights and finally the event
hazards maximize the imputed likelihood. The theta-likelihoods separate by
transition (Poisson approximation, classical) or by origin state (exact),
so each separable block is maximized on its own.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .adjudication import (AdjudicationData, AdjudicationModel, absorption_weights, benchmark_adjudication_model,
                           fit_adjudication)
from .core import Dataset, DataError, NumericalError, OptimizerConfig, QuadratureConfig, substream
from .delay import DELAY_FREE, DelayModel, collect_delay_observations, fit_delay_model
from .likelihood import EventModel, SojournTable, benchmark_event_model
from .optimize import nelder_mead_maximize
from .results import BootstrapResult, FitResult, percentile_intervals

log = logging.getLogger(__name__)

METHODS = ("exact", "poisson", "naive1", "naive2", "oracle")


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage} stage failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class ModelSpec:
    """Starting models for the three stages (their parameters are start values)."""

    event: EventModel
    adjudication: AdjudicationModel | None
    delays: Mapping = field(default_factory=dict)

    def delay_start(self) -> dict:
        return {tr: self.delays.get(tr, DELAY_FREE) for tr in self.event.transitions}


def benchmark_spec(g=(0.8, -1.2)) -> ModelSpec:
    """Correctly specified families for the benchmark, with neutral start values.

    The thinned 2 -> 3 hazard family carries the adjudication law at ``g``.
    """
    event = benchmark_event_model(g=g)
    delays = {(1, 2): DELAY_FREE, (1, 3): DelayModel(1.0, 1.0, (0.0,)), (2, 3): DelayModel(1.0, 1.0, (0.0,))}
    return ModelSpec(event=event.with_delays(delays), adjudication=benchmark_adjudication_model((1.0, -1.0)),
                     delays=delays)


def misspecified_spec() -> ModelSpec:
    from .adjudication import misspecified_adjudication_model
    from .delay import GammaDelayModel
    from .likelihood import misspecified_event_model

    event = misspecified_event_model()
    delays = {(1, 2): DELAY_FREE, (1, 3): GammaDelayModel(1.0, 1.0, (0.0,)), (2, 3): GammaDelayModel(1.0, 1.0, (0.0,))}
    return ModelSpec(event=event.with_delays(delays), adjudication=misspecified_adjudication_model(), delays=delays)


# ---------------------------------------------------------------------------
# theta stage


def occurrence_exposure_start(table: SojournTable, model: EventModel) -> EventModel:
    """Zero coefficients with intercepts at log(occurrences / exposure) per transition."""
    params = {}
    for tr in model.transitions:
        blk = table.blocks.get(tr[0])
        occ = float(np.sum(blk.weight[blk.jump_rows[tr]])) if blk is not None else 0.0
        expo = float(np.sum(blk.weight * (blk.b - blk.a))) if blk is not None else 0.0
        params[tr] = tuple(model.hazards[tr].start(occ, expo))
    return model.with_params(params)


def _fit_transition(table: SojournTable, tr, start, kind, opt):
    fam = table.model.hazards[tr]
    z0 = fam.to_internal(np.asarray(start, dtype=float))

    def objective(z):
        return table.transition_loglik(tr, fam.from_internal(z), kind)

    z, val, diag = nelder_mead_maximize(objective, z0, opt)
    return tuple(fam.from_internal(z)), val, diag


def _fit_state(table: SojournTable, j, start: EventModel, opt):
    exits = start.exits(j)
    fams = [start.hazards[tr] for tr in exits]
    sizes = [f.n_params for f in fams]
    z0 = np.concatenate([f.to_internal(np.asarray(start.params[tr])) for f, tr in zip(fams, exits)])

    def unpack(z):
        out, i = {}, 0
        for tr, f, n in zip(exits, fams, sizes):
            out[tr] = f.from_internal(z[i:i + n])
            i += n
        return out

    z, val, diag = nelder_mead_maximize(lambda z: table.state_loglik(j, unpack(z)), z0, opt)
    return {tr: tuple(p) for tr, p in unpack(z).items()}, val, diag


def fit_theta(table: SojournTable, start: EventModel, kind: str, opt: OptimizerConfig,
              states: Sequence[int] | None = None) -> FitResult:
    """Maximize the theta-likelihood of ``kind`` (``exact``, ``approx`` or ``classical``) block by block.

    ``states`` restricts the fit to hazards leaving these origin states.
    """
    res = FitResult(warm_start="start")
    table.with_model(start)
    fitted = {}
    origins = sorted({tr[0] for tr in start.transitions})
    if states is not None:
        origins = [j for j in origins if j in states]
    for j in origins:
        if kind == "exact":
            if j not in table.blocks:
                continue
            params, val, diag = _fit_state(table, j, start, opt)
            fitted.update(params)
            res.objective[f"theta{j}"] = val
            res.diagnostics[f"theta{j}"] = diag
        else:
            for tr in start.exits(j):
                p, val, diag = _fit_transition(table, tr, start.params[tr], kind, opt)
                fitted[tr] = p
                key = f"theta{tr[0]}{tr[1]}"
                res.objective[key] = val
                res.diagnostics[key] = diag
    model = start.with_params(fitted)
    table.with_model(model)
    res.blocks["theta"] = model.vector()
    res.names["theta"] = model.names()
    res.models["event"] = model
    return res


# ---------------------------------------------------------------------------
# pipelines


class Prepared:
    """Compiled tables of one dataset, reused by every refit on it (bootstrap)."""

    def __init__(self, data: Dataset, spec: ModelSpec, quad: QuadratureConfig):
        self.data = data
        self.spec = spec
        self.quad = quad
        recs = data.records
        self.adjudication = None
        if spec.adjudication is not None and any(ev.track is not None for r in recs for ev in r.events):
            self.adjudication = AdjudicationData(recs, data.eta, spec.adjudication.transitions, quad)
        delayed = [tr for tr, m in spec.delay_start().items() if m is not DELAY_FREE]
        self.delay_obs = collect_delay_observations(recs, None, data.eta, delayed)
        self.table = SojournTable(recs, spec.event, data.eta, None, quad)
        self.pending = np.array([r.last_pending for r in recs])


def _needed_delays(model: EventModel, states) -> set:
    if states is None:
        return set(model.transitions)
    need = set()
    for tr in model.transitions:
        if tr[0] in states or tr[1] in states:
            need.add(tr)
    return need


def two_step_fit(data: Dataset, spec: ModelSpec, opt: OptimizerConfig | None = None,
                 quad: QuadratureConfig | None = None, use_exact: bool = True, counts=None,
                 warm: FitResult | None = None, states: Sequence[int] | None = None,
                 prepared: Prepared | None = None) -> FitResult:
    """Adjudication fit, imputation weights, delay fit, theta fit.

    With ``use_exact`` the exact likelihood is maximized starting from the
    Poisson-approximation argmax. ``counts`` weights records (bootstrap),
    ``warm`` supplies start values from an earlier fit and ``states``
    restricts the theta stage (and the delay models it needs) to hazards
    leaving the given origin states.
    """
    opt = opt or OptimizerConfig()
    quad = quad or QuadratureConfig()
    prep = prepared or Prepared(data, spec, quad)
    timings = {}

    # adjudication
    t0 = time.perf_counter()
    adj_start = warm.models["adjudication"] if warm and "adjudication" in warm.models else spec.adjudication
    if prep.adjudication is not None and prep.adjudication.observed:
        try:
            res = fit_adjudication(data.records, adj_start, data.eta, opt, quad, counts=counts, data=prep.adjudication)
        except Exception as exc:
            raise StageError("adjudication", exc) from exc
        adj = res.models["adjudication"]
    else:
        res = FitResult()
        adj = spec.adjudication
    weights = np.ones(len(data))
    if prep.pending.any():
        if adj is None:
            raise StageError("weights", ValueError("pending events but no adjudication model"))
        idx = np.nonzero(prep.pending)[0]
        try:
            weights[idx] = absorption_weights([data.records[i] for i in idx], adj, data.eta)
        except Exception as exc:
            raise StageError("weights", exc) from exc
    timings["adjudication"] = time.perf_counter() - t0

    # delays
    t0 = time.perf_counter()
    need = _needed_delays(spec.event, states)
    delay_start = {tr: m for tr, m in spec.delay_start().items() if tr in need}
    if warm and "delay" in warm.models:
        delay_start = {tr: warm.models["delay"].get(tr, m) for tr, m in delay_start.items()}
    delays = dict(delay_start)
    if any(m is not DELAY_FREE for m in delay_start.values()):
        try:
            fres = fit_delay_model(data.records, weights, delay_start, data.eta, opt, counts=counts,
                                   observations=prep.delay_obs)
        except Exception as exc:
            raise StageError("delay", exc) from exc
        res = res.merge(fres)
        delays = fres.models["delay"]
    timings["delay"] = time.perf_counter() - t0

    # theta
    t0 = time.perf_counter()
    table = prep.table.set_weights(weights, counts).bind(delays)
    try:
        if warm and "event" in warm.models:
            start = warm.models["event"]
        else:
            start = occurrence_exposure_start(table, spec.event)
        approx = fit_theta(table, start, "approx", opt, states)
        theta = approx
        if use_exact:
            exact = fit_theta(table, approx.models["event"], "exact", opt, states)
            theta = exact
            theta.objective.update({f"approx:{k}": v for k, v in approx.objective.items()})
    except Exception as exc:
        raise StageError("theta", exc) from exc
    timings["theta"] = time.perf_counter() - t0
    res = res.merge(theta)
    res.warm_start = "warm" if warm else "occurrence-exposure"
    res.models["weights"] = weights
    res.models["delay"] = {**spec.delay_start(), **delays}
    res.models["timings"] = timings
    if adj is not None:
        res.models["adjudication"] = adj
    return res


def classical_fit(data: Dataset, spec: ModelSpec, opt: OptimizerConfig | None = None,
                  quad: QuadratureConfig | None = None, counts=None) -> FitResult:
    """Ordinary multistate MLE: every event confirmed, no delay correction."""
    opt = opt or OptimizerConfig()
    quad = quad or QuadratureConfig()
    event = replace(spec.event, delay_models={})
    table = SojournTable(data.records, event, data.eta, None, quad).set_weights(None, counts)
    start = occurrence_exposure_start(table, event)
    try:
        res = fit_theta(table, start, "classical", opt)
    except Exception as exc:
        raise StageError("theta", exc) from exc
    res.warm_start = "occurrence-exposure"
    return res


def naive_fit(data: Dataset, variant: str, spec: ModelSpec, opt=None, quad=None) -> FitResult:
    """Classical fit on a naive view (see :func:`msthin.simulate.build_views`)."""
    if variant not in ("naive1", "naive2"):
        raise ValueError(f"unknown naive variant {variant!r}")
    if any(r.last_pending for r in data.records):
        raise DataError("naive views must not contain pending events")
    return classical_fit(data, spec, opt, quad)


def fit_method(method: str, views: Mapping[str, Dataset], spec: ModelSpec, opt=None, quad=None) -> FitResult:
    """Dispatch on ``exact``, ``poisson``, ``naive1``, ``naive2`` or ``oracle``."""
    if method == "exact":
        return two_step_fit(views["observed"], spec, opt, quad, use_exact=True)
    if method == "poisson":
        return two_step_fit(views["observed"], spec, opt, quad, use_exact=False)
    if method in ("naive1", "naive2"):
        return naive_fit(views[method], method, spec, opt, quad)
    if method == "oracle":
        return classical_fit(views["oracle"], spec, opt, quad)
    raise ValueError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# bootstrap


def resample_counts(n: int, seed: int, b: int, stream: tuple = ()) -> np.ndarray:
    """Multiplicities of the ``n`` subjects in bootstrap resample ``b`` (substream ``(seed, *stream, b)``)."""
    idx = substream(seed, *stream, b).integers(0, n, size=n)
    return np.bincount(idx, minlength=n).astype(float)


@dataclass
class _BootJob:
    data: Dataset
    spec: ModelSpec
    opt: OptimizerConfig
    quad: QuadratureConfig
    use_exact: bool
    seed: int
    warm: FitResult | None
    states: tuple | None
    coords: tuple | None
    stream: tuple = ()


_JOB: dict = {}


def _init_worker(job: _BootJob):
    _JOB["job"] = job
    _JOB["prep"] = Prepared(job.data, job.spec, job.quad)


def _run_resample(b: int, counts=None):
    job: _BootJob = _JOB["job"]
    if counts is None:
        counts = resample_counts(len(job.data), job.seed, b, job.stream)
    try:
        fit = two_step_fit(job.data, job.spec, job.opt, job.quad, job.use_exact, counts=counts, warm=job.warm,
                           states=job.states, prepared=_JOB["prep"])
    except (StageError, NumericalError, ValueError) as exc:
        return b, None, str(exc)
    if not fit.converged:
        return b, None, "not converged: " + ",".join(k for k, d in fit.diagnostics.items() if not d.converged)
    theta = fit.blocks["theta"]
    if job.coords is not None:
        theta = theta[list(job.coords)]
    return b, theta, ""


def bootstrap_fit(data: Dataset, spec: ModelSpec, B: int, seed: int, opt: OptimizerConfig | None = None,
                  quad: QuadratureConfig | None = None, use_exact: bool = True,
                  levels=(0.90, 0.95, 0.99), jobs: int = 1, warm: FitResult | None = None,
                  states: Sequence[int] | None = None, coords: Sequence[int] | None = None,
                  resampler: Callable[[int], np.ndarray] | None = None, stream: tuple = ()) -> BootstrapResult:
    """Efron bootstrap over subjects with percentile intervals for theta.

    Each resample reruns the whole two-step pipeline. Resample ``b`` draws
    its subjects from the substream ``(seed, *stream, b)`` (or from ``resampler(b)``,
    which returns per-subject counts). ``warm`` starts every refit at an
    earlier fit; ``states`` and ``coords`` restrict the refit and the
    reported coordinates. Failed or non-converged resamples are dropped and
    counted.
    """
    if B < 1:
        raise ValueError("B must be at least 1")
    opt = opt or OptimizerConfig()
    quad = quad or QuadratureConfig()
    job = _BootJob(data, spec, opt, quad, use_exact, seed, warm, tuple(states) if states else None,
                   tuple(coords) if coords is not None else None, tuple(stream))
    results = []
    if jobs > 1 and resampler is None:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(job,)) as ex:
            results = list(ex.map(_run_resample, range(B), chunksize=max(1, B // (4 * jobs))))
    else:
        _init_worker(job)
        for b in range(B):
            results.append(_run_resample(b, None if resampler is None else resampler(b)))
    results.sort(key=lambda r: r[0])
    rows = [r[1] for r in results if r[1] is not None]
    failures = sum(r[1] is None for r in results)
    for b, _, msg in results:
        if msg:
            log.info("bootstrap resample %d dropped: %s", b, msg)
    names = list(spec.event.names())
    if coords is not None:
        names = [names[i] for i in coords]
    est = np.array(rows) if rows else np.zeros((0, len(names)))
    out = BootstrapResult(B=B, seed=seed, names=names, estimates=est, levels=tuple(levels), failures=failures)
    if rows:
        out.intervals = percentile_intervals(est, levels)
    return out
