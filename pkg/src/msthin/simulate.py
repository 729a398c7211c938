"""Data-generating process of the benchmark study and the dataset views built from it.

Subjects enter in state 1 at ``V ~ U(0, 1)`` and are followed to
``C | V ~ U(V, eta)``. Jumps come from the uncontaminated rates

    mu12~(t; X) = exp(th1 + th2 (t + X) + th3 sin(pi X / 2))
    mu13~(t; X) = exp(th4 + th5 t^2 + th6 cos(pi X / 2))
    mu23~(d; X) = exp(th7 d X^2)            (d = time since entering 2)

Jumps into state 3 are reported with a Weibull delay depending on the
origin state; the 1 -> 2 jump is reported at once. Each 2 -> 3 jump is
adjudicated from its report time up to ``eta``; reaching adjudication
state 3 confirms it, and undecided cases remain pending.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .adjudication import AdjudicationModel, absorption_weight, benchmark_adjudication_model, simulate_adjudication
from .core import AdjudicationTrack, Dataset, Outcome, ReportedEvent, SubjectRecord, substream
from .delay import DelayModel
from .hazards import cumulative_exit_hazard_state1, erfi_taylor, mu23_star, p_confirm
from .likelihood import BENCHMARK_F, BENCHMARK_THETA
from .thinning import lewis_thinning

__all__ = [
    "ScenarioConfig", "TrueEvent", "TruthRecord", "generate_subject", "generate_truth", "build_views",
    "simulate_dataset", "naive_view", "p_confirm", "mu23_star", "erfi_taylor", "cumulative_exit_hazard_state1",
    "VIEWS", "transition_counts", "delay_moments", "long_run_confirmation", "mean_confirmation_probability",
]

VIEWS = ("observed", "oracle", "naive1", "naive2")


@dataclass(frozen=True)
class ScenarioConfig:
    n: int = 1500
    eta: float = 5.0
    theta: tuple[float, ...] = BENCHMARK_THETA
    f: tuple[float, ...] = BENCHMARK_F
    g: tuple[float, float] = (0.8, -1.2)
    x_range: tuple[float, float] = (-4.0, 4.0)
    v_max: float = 1.0
    seed: int = 0
    delays: bool = True
    adjudication: bool = True

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if len(self.theta) != 7 or len(self.f) != 6 or len(self.g) != 2:
            raise ValueError("theta, f and g need 7, 6 and 2 entries")
        if not (0 <= self.v_max < self.eta and self.x_range[0] < self.x_range[1]):
            raise ValueError("invalid covariate or truncation law")

    def delay_models(self) -> dict:
        f = self.f
        return {(1, 3): DelayModel(f[0], f[1], (f[2],)), (2, 3): DelayModel(f[3], f[4], (f[5],))}

    def adjudication_model(self) -> AdjudicationModel:
        return benchmark_adjudication_model(self.g)


@dataclass(frozen=True)
class TrueEvent:
    time: float
    origin: int
    mark: int
    delay: float
    track: AdjudicationTrack | None
    xi: int

    @property
    def report_time(self) -> float:
        return self.time + self.delay


@dataclass(frozen=True)
class TruthRecord:
    subject_id: str
    x: float
    V: float
    C: float
    events: tuple[TrueEvent, ...] = field(default_factory=tuple)


def _rates12_13(theta, x):
    t1, t2, t3, t4, t5, t6, _ = theta
    a = t1 + t2 * x + t3 * math.sin(0.5 * math.pi * x)
    b = t4 + t6 * math.cos(0.5 * math.pi * x)

    def mu12(t):
        return np.exp(a + t2 * np.asarray(t))

    def mu13(t):
        return np.exp(b + t5 * np.asarray(t) ** 2)

    return mu12, mu13


def generate_subject(cfg: ScenarioConfig, rng: np.random.Generator, subject_id: str = "0") -> TruthRecord:
    """Simulate one subject's full (uncontaminated) history with delays, adjudication and outcomes."""
    x = float(rng.uniform(*cfg.x_range))
    V = float(rng.uniform(0.0, cfg.v_max))
    C = float(rng.uniform(V, cfg.eta))
    theta = cfg.theta
    mu12, mu13 = _rates12_13(theta, x)
    delays = cfg.delay_models()
    adj = cfg.adjudication_model()
    events: list[TrueEvent] = []

    t1 = lewis_thinning(lambda t: mu12(t) + mu13(t), (V, C), rng)
    if t1 is None:
        return TruthRecord(subject_id, x, V, C)
    r12, r13 = float(mu12(t1)), float(mu13(t1))
    mark = 2 if rng.uniform() * (r12 + r13) < r12 else 3
    if mark == 3:
        u = float(delays[(1, 3)].sample([x], rng)) if cfg.delays else 0.0
        events.append(TrueEvent(t1, 1, 3, u, None, 1))
        return TruthRecord(subject_id, x, V, C, tuple(events))
    events.append(TrueEvent(t1, 1, 2, 0.0, None, 1))
    c7 = theta[6] * x * x
    t2 = lewis_thinning(lambda t: np.exp(c7 * (np.asarray(t) - t1)), (t1, C), rng)
    if t2 is None:
        return TruthRecord(subject_id, x, V, C, tuple(events))
    u = float(delays[(2, 3)].sample([x], rng)) if cfg.delays else 0.0
    report = t2 + u
    if not cfg.adjudication:
        events.append(TrueEvent(t2, 2, 3, u, None, 1))
        return TruthRecord(subject_id, x, V, C, tuple(events))
    track = simulate_adjudication(adj, 1, report, max(report, cfg.eta), [x], (t2, u), rng)
    if track.outcome is Outcome.CONFIRMED:
        xi = 1
    else:
        if report <= cfg.eta:
            probe = SubjectRecord("probe", (x,), V, C, 1, (ReportedEvent(t2, 3, u, track),))
            w = absorption_weight(probe, adj, cfg.eta)
        else:
            w = float(p_confirm(x, cfg.g))
        xi = int(rng.uniform() < w)
    events.append(TrueEvent(t2, 2, 3, u, track, xi))
    return TruthRecord(subject_id, x, V, C, tuple(events))


def generate_truth(cfg: ScenarioConfig, replication: int = 0) -> list[TruthRecord]:
    """Subjects ``0..n-1``; subject ``i`` uses the substream ``(seed, replication, i)``."""
    return [generate_subject(cfg, substream(cfg.seed, replication, i), f"s{i}") for i in range(cfg.n)]


# ---------------------------------------------------------------------------
# views


def _observed(rec: TruthRecord, eta: float) -> SubjectRecord:
    evs = [ReportedEvent(e.time, e.mark, e.delay, e.track) for e in rec.events if e.report_time <= eta]
    return SubjectRecord(rec.subject_id, (rec.x,), rec.V, rec.C, 1, tuple(evs))


def _oracle(rec: TruthRecord) -> SubjectRecord:
    evs = [ReportedEvent(e.time, e.mark, 0.0) for e in rec.events if e.xi == 1]
    return SubjectRecord(rec.subject_id, (rec.x,), rec.V, rec.C, 1, tuple(evs))


def _confirm_all(evs) -> tuple[ReportedEvent, ...]:
    """Treat every event that is not rejected as confirmed."""
    return tuple(ReportedEvent(e.time, e.mark, e.delay) for e in evs if e.outcome is not Outcome.REJECTED)


def _naive1(obs: SubjectRecord) -> SubjectRecord:
    return replace(obs, events=_confirm_all(obs.events))


def _naive2(obs: SubjectRecord, eta: float, back: float = 1.0, max_pending: float = 2.0) -> SubjectRecord | None:
    C = min(obs.C, eta - back)
    if C <= obs.V:
        return None
    evs = [e for e in obs.events if e.time <= C]
    evs = [e for e in evs if not (e.outcome is Outcome.PENDING and eta - e.report_time > max_pending)]
    return SubjectRecord(obs.subject_id, obs.covariates, obs.V, C, obs.initial_state, _confirm_all(evs))


def build_views(truth: Sequence[TruthRecord], eta: float, views: Sequence[str] = VIEWS) -> dict[str, Dataset]:
    """Observed, oracle and the two naive datasets built from the same truth.

    observed: reports after ``eta`` deleted, pending tracks kept.
    oracle: every jump with ``xi = 1``, no reporting delays.
    naive1: observed, all unrejected events treated as confirmed.
    naive2: observed, censored at ``min(C, eta - 1)``, events pending for
    more than two years deleted, the rest treated as confirmed.
    """
    out = {}
    obs = [_observed(r, eta) for r in truth]
    for v in views:
        if v == "observed":
            recs = obs
        elif v == "oracle":
            recs = [_oracle(r) for r in truth]
        elif v == "naive1":
            recs = [_naive1(o) for o in obs]
        elif v == "naive2":
            recs = [r for r in (_naive2(o, eta) for o in obs) if r is not None]
        else:
            raise ValueError(f"unknown view {v!r}")
        out[v] = Dataset(tuple(recs), eta, 1)
    return out


def naive_view(data: Dataset, variant: str) -> Dataset:
    """Naive view built from an observed dataset (see :func:`build_views`)."""
    if variant == "naive1":
        recs = [_naive1(r) for r in data.records]
    elif variant == "naive2":
        recs = [r for r in (_naive2(o, data.eta) for o in data.records) if r is not None]
    else:
        raise ValueError(f"unknown naive variant {variant!r}")
    return Dataset(tuple(recs), data.eta, data.num_covariates)


def simulate_dataset(cfg: ScenarioConfig, replication: int = 0, views: Sequence[str] = VIEWS):
    truth = generate_truth(cfg, replication)
    return truth, build_views(truth, cfg.eta, views)


def transition_counts(truth: Sequence[TruthRecord]) -> dict[str, int]:
    counts = {"1-2": 0, "1-3": 0, "2-3": 0}
    for rec in truth:
        for e in rec.events:
            counts[f"{e.origin}-{e.mark}"] += 1
    return counts


def delay_moments(truth: Sequence[TruthRecord], eta: float | None = None) -> dict[str, tuple[float, float]]:
    """Mean and SD of delays by origin state (only reported ones if ``eta`` is given)."""
    out = {}
    for origin in (1, 2):
        u = np.array([e.delay for r in truth for e in r.events
                      if e.mark == 3 and e.origin == origin and (eta is None or e.report_time <= eta)])
        out[f"{origin}-3"] = (float(u.mean()) if u.size else math.nan, float(u.std(ddof=1)) if u.size > 1 else math.nan)
    return out


def long_run_confirmation(cfg: ScenarioConfig, n: int, horizon: float = 2000.0, seed: int | None = None) -> float:
    """Fraction of simulated adjudications confirmed within ``horizon`` years, X drawn from its law."""
    adj = cfg.adjudication_model()
    seed = cfg.seed if seed is None else seed
    hits = 0
    for i in range(n):
        rng = substream(seed, 10**6, i)
        x = float(rng.uniform(*cfg.x_range))
        tr = simulate_adjudication(adj, 1, 0.0, horizon, [x], (0.0, 0.0), rng)
        hits += tr.outcome is Outcome.CONFIRMED
    return hits / n


def mean_confirmation_probability(g, x_range=(-4.0, 4.0), nodes: int = 64) -> float:
    """Average of ``p(X)`` over a uniform covariate law by Gauss-Legendre quadrature."""
    z, w = np.polynomial.legendre.leggauss(nodes)
    lo, hi = x_range
    x = 0.5 * (hi - lo) * z + 0.5 * (hi + lo)
    return float(0.5 * np.sum(w * p_confirm(x, g)))
