"""Adjudication multistate model: likelihood, fitting, simulation and absorption weights.

Each reported event that is subject to adjudication carries a track in a
small acyclic state space that starts at the report time. Hitting a state
in ``outcome_map`` decides the event (confirmed or rejected). The hazards
``omega_jk`` see the context ``t`` (calendar time), ``d`` (time in the
current adjudication state), ``r`` (time since report), ``e`` (time since
the event occurred), ``u`` (its reporting delay) and the baseline
covariates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .core import (AdjudicationTrack, DataError, FitDiagnostics, OptimizerConfig, Outcome,
                   QuadratureConfig, ReportedEvent, StateSpace, SubjectRecord, simpson_nodes)
from .hazards import Context, HazardFamily, family_from_spec
from .optimize import nelder_mead_maximize
from .results import FitResult
from .thinning import lewis_thinning


@dataclass(frozen=True)
class AdjudicationModel:
    state_space: StateSpace
    hazards: Mapping[tuple[int, int], HazardFamily]
    params: Mapping[tuple[int, int], tuple[float, ...]]
    outcome_map: Mapping[int, Outcome]
    start_state: int = 1
    closed_form: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "params", {tr: tuple(float(v) for v in p) for tr, p in self.params.items()})
        for tr in self.hazards:
            if tr not in self.state_space.allowed_transitions:
                raise DataError(f"hazard for a disallowed adjudication transition {tr}")
        self.state_space.topological_order()

    def with_params(self, params: Mapping) -> AdjudicationModel:
        merged = dict(self.params)
        merged.update({tr: tuple(p) for tr, p in params.items()})
        return replace(self, params=merged)

    def rate(self, tr, ctx: Context) -> np.ndarray:
        return self.hazards[tr].rate(np.asarray(self.params[tr]), ctx)

    @property
    def transitions(self) -> list[tuple[int, int]]:
        return sorted(self.hazards)

    def vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.params[tr]) for tr in self.transitions])

    def names(self) -> list[str]:
        return [f"g{j}{k}.{n}" for (j, k) in self.transitions for n in self.hazards[(j, k)].param_names]

    def describe(self) -> dict:
        return {
            "labels": list(self.state_space.labels),
            "hazards": {f"{j}-{k}": fam.spec for (j, k), fam in self.hazards.items()},
            "params": {f"{j}-{k}": list(p) for (j, k), p in self.params.items()},
            "outcomes": {str(s): o.value for s, o in self.outcome_map.items()},
            "start_state": self.start_state,
            "closed_form": self.closed_form,
        }


def benchmark_adjudication_model(g=(0.8, -1.2)) -> AdjudicationModel:
    """Three-stage chain 1 -> 2 -> 3 with state 3 meaning confirmed."""
    space = StateSpace.build(["received", "assessed", "confirmed"], [(1, 2), (2, 3)])
    return AdjudicationModel(
        state_space=space,
        hazards={(1, 2): family_from_spec("scaled:s6_omega12"), (2, 3): family_from_spec("loglinear:s6_omega23")},
        params={(1, 2): (g[0],), (2, 3): (g[1],)},
        outcome_map={3: Outcome.CONFIRMED},
        closed_form="s6",
    )


def misspecified_adjudication_model(g=(0.0, -0.5, 0.0, -1.0)) -> AdjudicationModel:
    space = StateSpace.build(["received", "assessed", "confirmed"], [(1, 2), (2, 3)])
    return AdjudicationModel(
        state_space=space,
        hazards={(1, 2): family_from_spec("loglinear:miss_omega12"), (2, 3): family_from_spec("loglinear:miss_omega23")},
        params={(1, 2): g[:2], (2, 3): g[2:]},
        outcome_map={3: Outcome.CONFIRMED},
    )


# ---------------------------------------------------------------------------
# sojourn tables


@dataclass
class Sojourns:
    """Adjudication sojourns ``(state, entry, a, b, jump_to)`` plus event context."""

    state: np.ndarray
    entry: np.ndarray
    a: np.ndarray
    b: np.ndarray
    to: np.ndarray
    report: np.ndarray
    event_time: np.ndarray
    delay: np.ndarray
    x: np.ndarray
    weight: np.ndarray
    subject: np.ndarray

    def __len__(self):
        return self.state.size


def track_sojourns(ev: ReportedEvent, end: float):
    """Sojourns ``(state, entry, a, b, to)`` of one track observed on ``(report, end]``; ``to=0`` means censored."""
    tr = ev.track
    out = []
    state, entry = tr.initial_state, tr.report_time
    for tau, s in tr.transitions:
        if tau > end:
            break
        out.append((state, entry, entry, tau, s))
        state, entry = s, tau
    if end > entry:
        out.append((state, entry, entry, end, 0))
    return out


def collect_sojourns(records: Sequence[SubjectRecord], eta: float) -> Sojourns:
    rows = []
    for n, rec in enumerate(records):
        for i, ev in enumerate(rec.events):
            if ev.track is None:
                continue
            end = eta if i + 1 == len(rec.events) else min(eta, rec.events[i + 1].report_time)
            if ev.track.outcome is not Outcome.PENDING:
                end = min(end, ev.track.outcome_time)
            for s in track_sojourns(ev, end):
                rows.append((*s, ev.report_time, ev.time, ev.delay, rec.covariates, n))
    if not rows:
        z = np.zeros(0)
        return Sojourns(z, z, z, z, z.astype(int), z, z, z, np.zeros((0, 1)), z, z.astype(int))
    st, en, a, b, to, rep, et, u, x, subj = zip(*rows)
    return Sojourns(np.array(st, dtype=int), np.array(en), np.array(a), np.array(b), np.array(to, dtype=int),
                    np.array(rep), np.array(et), np.array(u), np.array(x, dtype=float), np.ones(len(rows)),
                    np.array(subj, dtype=int))


def _context(t, soj: Sojourns, idx=None):
    sl = slice(None) if idx is None else idx
    extra = (slice(None),) + (None,) * (np.ndim(t) - 1)

    def col(v):
        return v[sl][extra]

    return Context(t=t, d=t - col(soj.entry), x=soj.x[sl][extra + (slice(None),)] if np.ndim(t) > 1 else soj.x[sl],
                   r=t - col(soj.report), e=t - col(soj.event_time), u=np.broadcast_to(col(soj.delay), np.shape(t)))


@dataclass
class _TransitionTerms:
    jump_ctx: Context
    jump_w: np.ndarray
    nodes_ctx: Context
    node_w: np.ndarray
    jump_subject: np.ndarray
    node_subject: np.ndarray

    def reweighted(self, counts) -> _TransitionTerms:
        if counts is None:
            return self
        counts = np.asarray(counts, dtype=float)
        return replace(self, jump_w=self.jump_w * counts[self.jump_subject],
                       node_w=self.node_w * counts[self.node_subject][:, None])


def _transition_terms(soj: Sojourns, tr, quad: QuadratureConfig) -> _TransitionTerms:
    j, k = tr
    in_j = np.nonzero(soj.state == j)[0]
    jumps = in_j[soj.to[in_j] == k]
    nodes, w = simpson_nodes(soj.a[in_j], soj.b[in_j], quad.subintervals)
    return _TransitionTerms(
        jump_ctx=_context(soj.b[jumps], soj, jumps),
        jump_w=soj.weight[jumps],
        nodes_ctx=_context(nodes, soj, in_j),
        node_w=w * soj.weight[in_j][:, None],
        jump_subject=soj.subject[jumps],
        node_subject=soj.subject[in_j],
    )


class AdjudicationData:
    """Compiled adjudication sojourns of a dataset, reusable across refits."""

    def __init__(self, records: Sequence[SubjectRecord], eta: float, transitions,
                 quad: QuadratureConfig | None = None):
        self.quad = quad or QuadratureConfig()
        self.sojourns = collect_sojourns(records, eta)
        self.n_records = len(records)
        self.observed = {(int(s), int(t)) for s, t in zip(self.sojourns.state, self.sojourns.to) if t}
        self.terms = {tr: _transition_terms(self.sojourns, tr, self.quad) for tr in transitions}


def _transition_loglik(fam: HazardFamily, params, terms: _TransitionTerms) -> float:
    with np.errstate(all="ignore"):
        jump = np.sum(terms.jump_w * fam.log_rate(params, terms.jump_ctx)) if terms.jump_w.size else 0.0
        expo = np.sum(fam.rate(params, terms.nodes_ctx) * terms.node_w)
    return float(jump - expo)


def adj_loglik(record: SubjectRecord, model: AdjudicationModel, eta: float,
               quad: QuadratureConfig | None = None) -> float:
    """Counting-process log-likelihood of all adjudication tracks of one subject."""
    quad = quad or QuadratureConfig()
    soj = collect_sojourns([record], eta)
    if len(soj) == 0:
        return 0.0
    for s, to in zip(soj.state, soj.to):
        if to and (int(s), int(to)) not in model.state_space.allowed_transitions:
            raise DataError(f"{record.subject_id}: adjudication transition {(int(s), int(to))} not allowed")
    total = 0.0
    for tr in model.transitions:
        total += _transition_loglik(model.hazards[tr], np.asarray(model.params[tr]), _transition_terms(soj, tr, quad))
    return total


def fit_adjudication(records: Sequence[SubjectRecord], start: AdjudicationModel, eta: float,
                     opt: OptimizerConfig | None = None, quad: QuadratureConfig | None = None,
                     counts=None, data: AdjudicationData | None = None) -> FitResult:
    """Maximize the summed adjudication log-likelihood transition by transition.

    The likelihood separates over transitions, so each hazard is fitted on
    its own. A transition without observed occurrences is flagged and kept
    at its start value; one whose optimizer does not converge is flagged
    ``divergent``. ``counts`` multiplies each record's contribution.
    """
    opt = opt or OptimizerConfig()
    data = data or AdjudicationData(records, eta, start.transitions, quad)
    bad = data.observed - start.state_space.allowed_transitions
    if bad:
        raise DataError(f"adjudication transitions {sorted(bad)} are not allowed")
    if not data.observed:
        raise ValueError("no adjudication transitions observed: the adjudication model is not identified")
    res = FitResult(warm_start="start")
    fitted = {}
    for tr in start.transitions:
        fam = start.hazards[tr]
        key = f"g{tr[0]}{tr[1]}"
        terms = data.terms[tr].reweighted(counts)
        if not np.any(terms.jump_w > 0):
            fitted[tr] = start.params[tr]
            d = FitDiagnostics(converged=True, message="no occurrences; hazard not identified")
            d.flags.append("no_occurrences")
            res.diagnostics[key] = d
            continue
        z0 = fam.to_internal(np.asarray(start.params[tr]))

        def objective(z, fam=fam, terms=terms):
            return _transition_loglik(fam, fam.from_internal(z), terms)

        z, val, diag = nelder_mead_maximize(objective, z0, opt)
        if not diag.converged:
            diag.flags.append("divergent")
        fitted[tr] = tuple(fam.from_internal(z))
        res.objective[key] = val
        res.diagnostics[key] = diag
    model = start.with_params(fitted)
    res.blocks["g"] = model.vector()
    res.names["g"] = model.names()
    res.models["adjudication"] = model
    return res


# ---------------------------------------------------------------------------
# absorption probabilities


@dataclass
class AbsorptionResult:
    confirmed: float
    rejected: float
    pending: float
    horizon: float
    uncertain: bool = False


@dataclass(frozen=True)
class PendingState:
    """Where a pending track sits at the analysis time."""

    state: int
    entry: float
    report: float
    event_time: float
    delay: float
    x: tuple[float, ...]


def pending_state(record: SubjectRecord, eta: float) -> PendingState | None:
    if not record.last_pending or record.events[-1].track is None:
        return None
    ev = record.events[-1]
    state, entry = ev.track.initial_state, ev.track.report_time
    for tau, s in ev.track.transitions:
        if tau <= eta:
            state, entry = s, tau
    return PendingState(state, entry, ev.report_time, ev.time, ev.delay, record.covariates)


def _closed_form_s6(model: AdjudicationModel, ps: PendingState, eta: float) -> float:
    g1 = model.params[(1, 2)][0]
    g2 = model.params[(2, 3)][0]
    x = ps.x[0]

    def from_two(d):
        return 1.0 if g2 >= 0 else -math.expm1(math.exp(g2 * d) / g2)

    if ps.state == 1:
        r = eta - ps.report
        return -math.expm1(-g1 * x * x / (r + 2.0)) * from_two(0.0)
    if ps.state == 2:
        return from_two(eta - ps.entry)
    return 1.0 if model.outcome_map.get(ps.state) is Outcome.CONFIRMED else 0.0


class _Chain:
    """Cohort bookkeeping for the forward solver."""

    def __init__(self, model: AdjudicationModel, ps: PendingState):
        self.model = model
        self.ps = ps
        self.x = np.asarray(ps.x, dtype=float)
        space = model.state_space
        self.order = [s for s in space.topological_order() if not space.is_absorbing(s)]
        self.exits = {s: space.exits(s) for s in self.order}
        self.cohorts = {s: (np.zeros(0), np.zeros(0)) for s in self.order}
        self.absorbed: dict[int, float] = {}

    def rates(self, s, t, entry):
        """Exit rates (one row per transition) for cohorts entered at ``entry``, evaluated at ``t``."""
        t = np.broadcast_to(np.asarray(t, dtype=float), entry.shape)
        ps = self.ps
        ctx = Context(t=t, d=t - entry, x=self.x, r=t - ps.report, e=t - ps.event_time,
                      u=np.full(entry.shape, ps.delay))
        return np.array([self.model.rate(tr, ctx) for tr in self.exits[s]])

    def route(self, s, cum, mass, lost, when, inflow):
        """Split ``lost`` mass over the exits of ``s`` in proportion to their cumulative hazards."""
        total = cum.sum(axis=0)
        share = np.where(total > 0, lost / np.where(total > 0, total, 1.0), 0.0)
        for (_, k), c in zip(self.exits[s], cum):
            flow = share * c
            if k in self.cohorts:
                inflow.setdefault(k, ([], []))
                inflow[k][0].append(np.broadcast_to(when, flow.shape))
                inflow[k][1].append(flow)
            else:
                self.absorbed[k] = self.absorbed.get(k, 0.0) + float(np.sum(flow))

    def step(self, t, h, max_cohorts):
        inflow: dict[int, tuple[list, list]] = {}
        for s in self.order:
            entry, mass = self.cohorts[s]
            if entry.size:
                cum = h / 6.0 * (self.rates(s, t, entry) + 4.0 * self.rates(s, t + h / 2, entry)
                                 + self.rates(s, t + h, entry))
                surv = np.exp(-cum.sum(axis=0))
                self.route(s, cum, mass, mass * (1.0 - surv), t + h / 2, inflow)
                mass = mass * surv
            if s in inflow:
                # mass that entered during this step faces the hazards for the rest of it
                e_new = np.concatenate(inflow[s][0])
                m_new = np.concatenate(inflow[s][1])
                rem = t + h - e_new
                cum = rem * self.rates(s, e_new + rem / 2, e_new)
                surv = np.exp(-cum.sum(axis=0))
                self.route(s, cum, m_new, m_new * (1.0 - surv), e_new + rem / 2, inflow)
                keep = m_new > 0
                entry = np.concatenate([entry, e_new[keep]])
                mass = np.concatenate([mass, (m_new * surv)[keep]])
            if entry.size > max_cohorts:
                entry, mass = _merge_cohorts(entry, mass)
            self.cohorts[s] = (entry, mass)

    @property
    def pending(self) -> float:
        return sum(float(np.sum(m)) for _, m in self.cohorts.values())

    def decided(self, outcome) -> float:
        return sum(v for k, v in self.absorbed.items() if self.model.outcome_map.get(k) is outcome)


def _merge_cohorts(entry, mass):
    """Merge neighbouring cohorts pairwise (mass-weighted entry times)."""
    n2 = entry.size // 2 * 2
    m2 = mass[:n2].reshape(-1, 2).sum(axis=1)
    e2 = np.where(m2 > 0, (entry[:n2] * mass[:n2]).reshape(-1, 2).sum(axis=1) / np.where(m2 > 0, m2, 1.0),
                  entry[:n2].reshape(-1, 2).mean(axis=1))
    return np.concatenate([e2, entry[n2:]]), np.concatenate([m2, mass[n2:]])


def absorption_probabilities(model: AdjudicationModel, ps: PendingState, t0: float, step: float = 1 / 256,
                             horizon: float = 50.0, max_horizon: float = 400.0, tol: float = 1e-8,
                             max_cohorts: int = 2048) -> AbsorptionResult:
    """Forward occupation probabilities of the adjudication chain started at ``t0``.

    Mass in each transient state is tracked by entry cohort, so hazards may
    depend on the time spent in a state entered after ``t0``. Exit hazards
    are integrated over each step by Simpson's rule; mass leaving during a
    step enters its target at the step midpoint and is exposed for the rest
    of the step. The horizon starts at ``horizon`` and is doubled (together
    with the step) until the pending mass is below ``tol`` or absorption has
    stalled; hitting ``max_horizon`` first marks the result uncertain.
    """
    chain = _Chain(model, ps)
    if ps.state not in chain.cohorts:
        out = model.outcome_map.get(ps.state)
        return AbsorptionResult(float(out is Outcome.CONFIRMED), float(out is Outcome.REJECTED), 0.0, 0.0)
    chain.cohorts[ps.state] = (np.array([ps.entry]), np.array([1.0]))
    t, h, end = t0, step, t0 + horizon
    uncertain = False
    while True:
        before = 1.0 - chain.pending
        steps_per_year = max(1, int(round(1.0 / h)))
        n = int(round((end - t) / h))
        for i in range(n):
            chain.step(t, h, max_cohorts)
            t += h
            if (i + 1) % steps_per_year == 0 and chain.pending < tol:
                break
        if chain.pending < tol:
            break
        if 1.0 - chain.pending - before < tol:
            break
        if end - t0 >= max_horizon:
            uncertain = True
            break
        end = t0 + 2.0 * (end - t0)
        h *= 2.0
    return AbsorptionResult(chain.decided(Outcome.CONFIRMED), chain.decided(Outcome.REJECTED),
                            chain.pending, t - t0, uncertain)


def absorption_weight(record: SubjectRecord, model: AdjudicationModel, eta: float, horizon: float = 50.0,
                      tol: float = 1e-8, use_closed_form: bool = True, **kw) -> float:
    """``w(1, Z; g)``: probability that the last reported event ends up confirmed.

    Returns 1 when the last event is confirmed (or there is none) and 0 when
    it is rejected. Otherwise the adjudication chain is run forward from its
    state at ``eta``.
    """
    if not record.events:
        return 1.0
    last = record.events[-1]
    if last.outcome is Outcome.CONFIRMED:
        return 1.0
    if last.outcome is Outcome.REJECTED:
        return 0.0
    ps = pending_state(record, eta)
    if use_closed_form and model.closed_form == "s6":
        return _closed_form_s6(model, ps, eta)
    return absorption_probabilities(model, ps, eta, horizon=horizon, tol=tol, **kw).confirmed


def absorption_weights(records: Sequence[SubjectRecord], model: AdjudicationModel, eta: float, **kw) -> np.ndarray:
    return np.array([absorption_weight(rec, model, eta, **kw) for rec in records])


# ---------------------------------------------------------------------------
# simulation


def simulate_adjudication(model: AdjudicationModel, start_state: int, start_time: float, end_time: float,
                          x, history: tuple[float, float], rng: np.random.Generator) -> AdjudicationTrack:
    """Simulate a track on ``(start_time, end_time]`` by thinning the adjudication hazards.

    ``start_time`` is the report time; ``history`` is ``(event_time, delay)``
    of the adjudicated event.
    """
    event_time, delay = history
    x = np.asarray(x, dtype=float)
    space = model.state_space
    state, entry = start_state, start_time
    jumps: list[tuple[float, int]] = []
    while entry < end_time and not space.is_absorbing(state):
        exits = space.exits(state)

        def ctx(ts, entry=entry):
            ts = np.asarray(ts, dtype=float)
            return Context(t=ts, d=ts - entry, x=x, r=ts - start_time, e=ts - event_time,
                           u=np.full(ts.shape, delay))

        def total(ts, exits=exits, ctx=ctx):
            c = ctx(ts)
            return np.sum([model.rate(tr, c) for tr in exits], axis=0)

        tau = lewis_thinning(total, (entry, end_time), rng)
        if tau is None:
            break
        c = ctx(np.array([tau]))
        rates = np.array([model.rate(tr, c)[0] for tr in exits])
        k = exits[int(rng.choice(len(exits), p=rates / rates.sum()))][1] if len(exits) > 1 else exits[0][1]
        jumps.append((tau, k))
        state, entry = k, tau
    outcome = model.outcome_map.get(state)
    if outcome is not None and jumps:
        return AdjudicationTrack(start_time, start_state, tuple(jumps), outcome, jumps[-1][0])
    return AdjudicationTrack(start_time, start_state, tuple(jumps))
