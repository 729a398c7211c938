"""Likelihoods for the event hazards under reporting delays.

The observed (delay-thinned) process has intensity ``mu_jk = gamma_j nu_jk``
with the weighted hazard ``nu_jk(t) = mu*_jk(t) pr_U(eta - t)``. Writing

    Den(t) = pi0 - int_{s0}^t P*(s) nu_j.(s) ds
           = pi0 - 1 + P*(t) + int_{s0}^t P*(s) [mu*_j.(s) - nu_j.(s)] ds,

where ``s0`` is the start of the current sojourn, ``P*`` the survival in
the current state and ``pi0`` the reporting probability of the jump that
started the sojourn, one has ``gamma_j = P*/Den`` and ``mu_j. = -Den'/Den``.
The exposure integral of the exact intensity therefore telescopes to
``log Den(b) - log Den(a)`` and a sojourn ending in a jump to ``k``
contributes ``log P*(b) + log nu_jk(b) - log pi0``. Only one quadrature
table per sojourn is needed. The second form of ``Den`` is the one
evaluated: its integral vanishes for delay-free exits, so the exact
likelihood reduces to the classical one without quadrature error.

Sojourns without an observed entry jump start at the left-truncation time
``V`` with ``pi0 = 1``; their durations are measured from time 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .core import (EventPath, NumericalError, QuadratureConfig, StateSpace, SubjectRecord, cumulative_simpson_rows,
                   path_state_at, simpson_nodes)
from .delay import DELAY_FREE, DelayModel
from .hazards import Context, HazardFamily, cumulative_along, family_from_spec

@dataclass(frozen=True)
class EventModel:
    state_space: StateSpace
    hazards: Mapping[tuple[int, int], HazardFamily]
    params: Mapping[tuple[int, int], tuple[float, ...]]
    delay_models: Mapping = None

    def __post_init__(self):
        object.__setattr__(self, "params", {tr: tuple(float(v) for v in p) for tr, p in self.params.items()})
        object.__setattr__(self, "delay_models", dict(self.delay_models or {}))
        for tr in self.hazards:
            if tr not in self.state_space.allowed_transitions:
                raise ValueError(f"hazard for a disallowed transition {tr}")
            if len(self.params[tr]) != self.hazards[tr].n_params:
                raise ValueError(f"wrong number of parameters for transition {tr}")

    @property
    def transitions(self) -> list[tuple[int, int]]:
        return sorted(self.hazards)

    def exits(self, j: int) -> list[tuple[int, int]]:
        return [tr for tr in self.transitions if tr[0] == j]

    def delay(self, tr):
        return self.delay_models.get(tr, DELAY_FREE)

    def rate(self, tr, ctx: Context) -> np.ndarray:
        return self.hazards[tr].rate(np.asarray(self.params[tr]), ctx)

    def pr_u(self, tr, horizon, x) -> np.ndarray:
        """Probability that a jump along ``tr`` is reported within ``horizon``."""
        m = self.delay(tr)
        horizon = np.asarray(horizon, dtype=float)
        if m is DELAY_FREE:
            return np.ones_like(horizon)
        return m.cdf(np.maximum(horizon, 0.0), x)

    def with_params(self, params: Mapping) -> EventModel:
        merged = dict(self.params)
        merged.update({tr: tuple(p) for tr, p in params.items()})
        return replace(self, params=merged)

    def with_vector(self, theta) -> EventModel:
        theta = np.asarray(theta, dtype=float)
        out, i = {}, 0
        for tr in self.transitions:
            n = self.hazards[tr].n_params
            out[tr] = tuple(theta[i:i + n])
            i += n
        return self.with_params(out)

    def with_delays(self, delay_models: Mapping) -> EventModel:
        return replace(self, delay_models={**self.delay_models, **delay_models})

    def vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.params[tr]) for tr in self.transitions])

    def names(self) -> list[str]:
        return [f"mu{j}{k}.{n}" for (j, k) in self.transitions for n in self.hazards[(j, k)].param_names]

    def describe(self) -> dict:
        return {
            "labels": list(self.state_space.labels),
            "hazards": {f"{j}-{k}": fam.spec for (j, k), fam in self.hazards.items()},
            "params": {f"{j}-{k}": list(p) for (j, k), p in self.params.items()},
            "delays": {f"{j}-{k}": (m.describe() if m is not DELAY_FREE else {"family": "delay_free"})
                       for (j, k), m in self.delay_models.items()},
        }


BENCHMARK_THETA = (math.log(0.15), 0.1, 0.4, math.log(0.1), 0.03, -0.3, -0.3)
BENCHMARK_F = (2.0, 0.5, 0.1, 1.0, 1.5, 0.2)


def benchmark_state_space() -> StateSpace:
    return StateSpace.build(["active", "disabled", "dead"], [(1, 2), (1, 3), (2, 3)])


def benchmark_delays(f=BENCHMARK_F) -> dict:
    return {(1, 2): DELAY_FREE, (1, 3): DelayModel(f[0], f[1], (f[2],)), (2, 3): DelayModel(f[3], f[4], (f[5],))}


def benchmark_event_model(theta=BENCHMARK_THETA, f=BENCHMARK_F, g=(0.8, -1.2)) -> EventModel:
    """Hazards ``mu*`` of the benchmark illness-death model (confirmed-event scale)."""
    return EventModel(
        state_space=benchmark_state_space(),
        hazards={(1, 2): family_from_spec("loglinear:s6_mu12"), (1, 3): family_from_spec("loglinear:s6_mu13"),
                 (2, 3): family_from_spec(f"jacod23:{g[0]!r},{g[1]!r}")},
        params={(1, 2): theta[0:3], (1, 3): theta[3:6], (2, 3): theta[6:7]},
        delay_models=benchmark_delays(f),
    )


def misspecified_event_model(theta=(math.log(0.15), 0.1, 0.0, math.log(0.1), 0.1, 0.0, 0.0, 0.0, 0.0),
                             f=BENCHMARK_F) -> EventModel:
    from .delay import GammaDelayModel

    return EventModel(
        state_space=benchmark_state_space(),
        hazards={(1, 2): family_from_spec("loglinear:miss_mu12"), (1, 3): family_from_spec("loglinear:miss_mu13"),
                 (2, 3): family_from_spec("loglinear:miss_mu23")},
        params={(1, 2): theta[0:3], (1, 3): theta[3:6], (2, 3): theta[6:9]},
        delay_models={(1, 2): DELAY_FREE, (1, 3): GammaDelayModel(1.0, 1.0, (0.0,)),
                      (2, 3): GammaDelayModel(1.0, 1.0, (0.0,))},
    )


# ---------------------------------------------------------------------------
# point evaluations along a single path


def _sojourn_start(path: EventPath, t: float, entry: float) -> tuple[int, float, float]:
    """(state, duration origin, integration start) for the sojourn containing ``t``."""
    j, d = path_state_at(path, t)
    origin = t - d
    jumped = any(tj < t for tj, _ in path.jumps)
    return j, origin, origin if jumped else max(origin, entry)


def _entry_transition(path: EventPath, t: float):
    prev = path.initial_state
    last = None
    for tj, s in path.jumps:
        if tj < t:
            last = (prev, s)
            prev = s
    return last


def _ctx(t, origin, x):
    t = np.asarray(t, dtype=float)
    return Context(t=t, d=t - origin, x=np.asarray(x, dtype=float))


def _cumulative_exit(model: EventModel, j, x, origin, a, b, m=64):
    total = 0.0
    for tr in model.exits(j):
        total = total + cumulative_along(model.hazards[tr], np.asarray(model.params[tr]), x, origin, a, b, m)
    return np.asarray(total, dtype=float)


def survival_in_state(model: EventModel, path: EventPath, x, t: float, entry: float = 0.0,
                      quad: QuadratureConfig | None = None) -> float:
    """``P*(t)``: probability of staying in the current state from the start of the sojourn to ``t``.

    The sojourn starts at the last jump before ``t``; without one it starts at
    ``entry`` (time 0 by default). Closed-form cumulative hazards are used when
    every exit hazard has one.
    """
    quad = quad or QuadratureConfig()
    j, origin, start = _sojourn_start(path, t, entry)
    if t <= start:
        return 1.0
    return float(np.exp(-_cumulative_exit(model, j, x, origin, start, t, quad.subintervals)))


def weighted_hazard(model: EventModel, path: EventPath, x, t: float, k: int, eta: float) -> float:
    """``nu_jk(t) = mu*_jk(t) pr_U(eta - t)``."""
    j, d = path_state_at(path, t)
    tr = (j, k)
    if tr not in model.hazards:
        raise ValueError(f"transition {tr} is not part of the model")
    mu = float(model.rate(tr, _ctx(t, t - d, x)))
    return mu * float(model.pr_u(tr, eta - t, x))


def _sojourn_tables(model, j, x, origin, start, t, eta, m):
    nodes, w = simpson_nodes(start, t, m)
    ctx = _ctx(nodes, origin, x)
    mu = np.zeros_like(nodes)
    nu = np.zeros_like(nodes)
    for tr in model.exits(j):
        r = model.rate(tr, ctx)
        mu = mu + r
        nu = nu + r * model.pr_u(tr, eta - nodes, x)
    cum = cumulative_simpson_rows(mu, np.asarray(t - start))
    return nodes, w, mu, nu, np.exp(-cum)


def gamma_numerators(model: EventModel, path: EventPath, x, t: float, entry: float = 0.0,
                     quad: QuadratureConfig | None = None) -> tuple[float, float]:
    """The numerator of ``gamma`` computed as ``1 - int P* mu*`` and as ``P*(t)``."""
    quad = quad or QuadratureConfig()
    j, origin, start = _sojourn_start(path, t, entry)
    if t <= start:
        return 1.0, 1.0
    _, w, mu, _, surv = _sojourn_tables(model, j, x, origin, start, t, math.inf, quad.subintervals)
    return float(1.0 - np.sum(w * surv * mu)), survival_in_state(model, path, x, t, entry, quad)


def gamma_correction(model: EventModel, path: EventPath, x, t: float, eta: float,
                     quad: QuadratureConfig | None = None, entry: float = 0.0, check: bool = False) -> float:
    """Factor ``gamma_j(t)`` turning ``nu`` into the intensity of the reported process.

    With ``check=True`` the reporting probability of the jump that started
    the sojourn is replaced by 1 (the ``gamma-check`` variant).
    """
    quad = quad or QuadratureConfig()
    j, origin, start = _sojourn_start(path, t, entry)
    prior = _entry_transition(path, t)
    pi0 = 1.0 if (check or prior is None) else float(model.pr_u(prior, eta - origin, x))
    if t <= start:
        return 1.0 / pi0 if pi0 > 0 else math.inf
    _, w, mu, nu, surv = _sojourn_tables(model, j, x, origin, start, t, eta, quad.subintervals)
    num = float(surv[-1])
    den = pi0 - 1.0 + num + float(np.sum(w * surv * (mu - nu)))
    if not den > 0:
        raise NumericalError(f"gamma denominator {den:.3g} is not positive (quadrature too coarse?)")
    return num / den


def poisson_error_bound(model: EventModel, path: EventPath, x, t: float, grid: int = 64) -> float:
    """``D(t-) * sup mu*_j.^2`` over the current sojourn, a bound on ``|mu_check - nu|``."""
    j, d = path_state_at(path, t)
    if d == 0.0:
        return 0.0
    s = np.linspace(t - d, t, grid + 1)
    ctx = _ctx(s, t - d, x)
    total = sum(model.rate(tr, ctx) for tr in model.exits(j))
    return float(d * np.max(np.asarray(total) ** 2))


# ---------------------------------------------------------------------------
# sojourn tables for whole datasets


def record_sojourns(record: SubjectRecord, include_last: bool = True):
    """``(state, a, b, origin, to, entry_transition)`` for each sojourn on ``(V, C]``."""
    path = record.path(include_last)
    state, a, origin, entry = record.initial_state, record.V, 0.0, None
    out = []
    for t, k in path.jumps:
        out.append((state, a, t, origin, k, entry))
        entry = (state, k)
        state, a, origin = k, t, t
    if record.C > a:
        out.append((state, a, record.C, origin, 0, entry))
    return out


def branch_sojourns(record: SubjectRecord):
    """Sojourns tagged by imputation branch.

    The tag is 0 for sojourns shared by both branches, 1 for those only in
    the branch keeping a pending last jump and -1 for those only in the
    branch dropping it. Their weights are 1, ``w1`` and ``1 - w1``.
    """
    keep = record_sojourns(record, True)
    if not record.last_pending:
        return [(s, 0) for s in keep]
    drop = record_sojourns(record, False)
    out = [(s, 0 if s in drop else 1) for s in keep]
    out += [(s, -1) for s in drop if s not in keep]
    return out


def branch_weights(branch, w1, counts=None):
    w1 = np.asarray(w1, dtype=float)
    w = np.where(branch == 0, 1.0, np.where(branch > 0, w1, 1.0 - w1))
    return w if counts is None else w * counts


@dataclass
class StateBlock:
    """All sojourns in one state, with Simpson nodes and (after binding) reporting probabilities."""

    state: int
    subject: np.ndarray
    a: np.ndarray
    b: np.ndarray
    origin: np.ndarray
    to: np.ndarray
    entry: list
    x: np.ndarray
    branch: np.ndarray
    weight: np.ndarray
    nodes: np.ndarray
    node_w: np.ndarray
    node_ctx: Context
    jump_rows: dict
    jump_ctx: dict
    pr_nodes: dict | None = None
    log_pr_jump: dict | None = None
    pi0: np.ndarray | None = None

    def __len__(self):
        return self.a.size


class SojournTable:
    """Compiled sojourns of a dataset for fast evaluation of the theta-likelihoods.

    ``weights`` are the imputation weights ``w(1, Z; g)`` (one per record);
    :meth:`set_weights` changes them, together with per-record ``counts``
    (bootstrap resampling by subject), without recompiling.
    """

    def __init__(self, records: Sequence[SubjectRecord], model: EventModel, eta: float,
                 weights=None, quad: QuadratureConfig | None = None):
        self.quad = quad or QuadratureConfig()
        self.eta = float(eta)
        self.model = model
        self.n_records = len(records)
        rows = {}
        for i, rec in enumerate(records):
            for (j, a, b, origin, to, entry), w in branch_sojourns(rec):
                if model.state_space.is_absorbing(j) or not model.exits(j):
                    continue
                if to and (j, to) not in model.hazards:
                    raise ValueError(f"{rec.subject_id}: transition {(j, to)} is not part of the model")
                rows.setdefault(j, []).append((i, a, b, origin, to, entry, rec.covariates, w))
        self.blocks: dict[int, StateBlock] = {}
        m = self.quad.subintervals
        for j, r in sorted(rows.items()):
            subj, a, b, origin, to, entry, x, w = zip(*r)
            a, b, origin = np.array(a), np.array(b), np.array(origin)
            x = np.array(x, dtype=float)
            to = np.array(to, dtype=int)
            nodes, node_w = simpson_nodes(a, b, m)
            jump_rows, jump_ctx = {}, {}
            for tr in model.exits(j):
                idx = np.nonzero(to == tr[1])[0]
                jump_rows[tr] = idx
                jump_ctx[tr] = Context(t=b[idx], d=b[idx] - origin[idx], x=x[idx])
            self.blocks[j] = StateBlock(
                state=j, subject=np.array(subj), a=a, b=b, origin=origin, to=to, entry=list(entry), x=x,
                branch=np.array(w), weight=np.ones(len(a)), nodes=nodes, node_w=node_w,
                node_ctx=Context(t=nodes, d=nodes - origin[:, None], x=x[:, None, :]),
                jump_rows=jump_rows, jump_ctx=jump_ctx)
        self.set_weights(weights)
        self.bind(model.delay_models)

    def bind(self, delay_models: Mapping) -> SojournTable:
        """Tabulate reporting probabilities for the given delay models."""
        self.model = self.model.with_delays(delay_models)
        for j, blk in self.blocks.items():
            blk.pr_nodes, blk.log_pr_jump = {}, {}
            horizon = self.eta - blk.nodes
            for tr in self.model.exits(j):
                dm = self.model.delay(tr)
                if dm is DELAY_FREE:
                    blk.pr_nodes[tr] = None
                    blk.log_pr_jump[tr] = np.zeros(blk.jump_rows[tr].size)
                    continue
                blk.pr_nodes[tr] = dm.cdf(np.maximum(horizon, 0.0), blk.x[:, None, :])
                idx = blk.jump_rows[tr]
                blk.log_pr_jump[tr] = dm.log_cdf(np.maximum(self.eta - blk.b[idx], 0.0), blk.x[idx])
            pi0 = np.ones(len(blk))
            for i, tr in enumerate(blk.entry):
                if tr is not None and self.model.delay(tr) is not DELAY_FREE:
                    pi0[i] = float(self.model.delay(tr).cdf(self.eta - blk.a[i], blk.x[i]))
            blk.pi0 = pi0
        return self

    def set_weights(self, weights=None, counts=None) -> SojournTable:
        w1 = np.ones(self.n_records) if weights is None else np.asarray(weights, dtype=float)
        for blk in self.blocks.values():
            c = None if counts is None else np.asarray(counts, dtype=float)[blk.subject]
            blk.weight = branch_weights(blk.branch, w1[blk.subject], c)
        return self

    def with_model(self, model: EventModel) -> SojournTable:
        """Same compiled sojourns with other hazard parameters (delays unchanged)."""
        self.model = replace(model, delay_models=self.model.delay_models)
        return self

    # -- objectives ---------------------------------------------------------
    def transition_loglik(self, tr, params, kind: str = "approx") -> float:
        """Poisson-approximation (``kind="approx"``) or classical (``"classical"``) term of one transition."""
        blk = self.blocks.get(tr[0])
        if blk is None:
            return 0.0
        fam = self.model.hazards[tr]
        params = np.asarray(params, dtype=float)
        idx = blk.jump_rows[tr]
        with np.errstate(all="ignore"):
            jump = float(np.sum(blk.weight[idx] * fam.log_rate(params, blk.jump_ctx[tr]))) if idx.size else 0.0
            rate = fam.rate(params, blk.node_ctx)
            if kind == "approx" and blk.pr_nodes[tr] is not None:
                rate = rate * blk.pr_nodes[tr]
            expo = float(np.sum(blk.weight[:, None] * blk.node_w * rate))
        out = jump - expo
        return out if math.isfinite(out) else -math.inf

    def state_loglik(self, j: int, params: Mapping | None = None) -> float:
        """Exact log-likelihood contribution of all sojourns in state ``j``."""
        blk = self.blocks.get(j)
        if blk is None:
            return 0.0
        params = params or {}
        exits = self.model.exits(j)
        mu_total = 0.0
        unreported = 0.0
        with np.errstate(all="ignore"):
            for tr in exits:
                p = np.asarray(params.get(tr, self.model.params[tr]), dtype=float)
                r = self.model.hazards[tr].rate(p, blk.node_ctx)
                mu_total = mu_total + r
                if blk.pr_nodes[tr] is not None:
                    unreported = unreported + r * (1.0 - blk.pr_nodes[tr])
            cum = cumulative_simpson_rows(np.broadcast_to(mu_total, blk.nodes.shape), blk.b - blk.a)
            surv = np.exp(-cum)
            den = blk.pi0 - 1.0 + surv[:, -1] + np.sum(blk.node_w * surv * unreported, axis=1)
            log_pi0 = np.log(blk.pi0)
            if np.any(den[blk.to == 0] <= 0):
                return -math.inf
            total = float(np.sum(blk.weight[blk.to == 0] * (np.log(den[blk.to == 0]) - log_pi0[blk.to == 0])))
            for tr in exits:
                idx = blk.jump_rows[tr]
                if not idx.size:
                    continue
                p = np.asarray(params.get(tr, self.model.params[tr]), dtype=float)
                lr = self.model.hazards[tr].log_rate(p, blk.jump_ctx[tr])
                total += float(np.sum(blk.weight[idx] * (-cum[idx, -1] + lr + blk.log_pr_jump[tr] - log_pi0[idx])))
        return total if math.isfinite(total) else -math.inf

    def loglik(self, kind: str = "exact", params: Mapping | None = None) -> float:
        params = params or {}
        if kind == "exact":
            return sum(self.state_loglik(j, params) for j in self.blocks)
        return sum(self.transition_loglik(tr, params.get(tr, self.model.params[tr]), kind)
                   for tr in self.model.transitions)


def _single(record: SubjectRecord, model: EventModel, eta, include_last, quad) -> SojournTable:
    if record.last_pending:
        w = 1.0 if include_last else 0.0
    else:
        w = 1.0
    return SojournTable([record], model, eta, [w], quad)


def exact_loglik(record: SubjectRecord, model: EventModel, include_last: bool = True,
                 quad: QuadratureConfig | None = None, *, eta: float) -> float:
    """Log-likelihood of one subject under the exact intensity ``gamma * nu``.

    ``include_last=False`` drops a pending last jump and extends the
    exposure in its origin state to ``C``.
    """
    val = _single(record, model, eta, include_last, quad).loglik("exact")
    if not math.isfinite(val):
        raise NumericalError(f"{record.subject_id}: exact log-likelihood is not finite")
    return val


def approx_loglik(record: SubjectRecord, model: EventModel, include_last: bool = True,
                  quad: QuadratureConfig | None = None, *, eta: float) -> float:
    """Poisson approximation: jump terms ``log mu*``, exposure ``int mu* pr_U(eta - t)``."""
    return _single(record, model, eta, include_last, quad).loglik("approx")


def classical_loglik(record: SubjectRecord, model: EventModel, include_last: bool = True,
                     quad: QuadratureConfig | None = None, *, eta: float = math.inf) -> float:
    return _single(record, model, eta, include_last, quad).loglik("classical")


def imputed_loglik(record: SubjectRecord, model: EventModel, w1: float, exact: bool = True,
                   quad: QuadratureConfig | None = None, *, eta: float) -> float:
    """``w0 * l(0) + w1 * l(1)`` for the chosen likelihood."""
    if not 0.0 <= w1 <= 1.0:
        raise ValueError("w1 must be a probability")
    fn = exact_loglik if exact else approx_loglik
    if not record.last_pending:
        return fn(record, model, True, quad, eta=eta)
    return w1 * fn(record, model, True, quad, eta=eta) + (1.0 - w1) * fn(record, model, False, quad, eta=eta)
