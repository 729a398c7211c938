"""Reporting-delay distributions with proportional reverse-time hazards.

A delay model has distribution function ``F0(t) ** exp(z . beta)`` for a
baseline CDF ``F0`` (Weibull by default, Gamma for the misspecification
study), so the reverse-time hazard ``alpha(t; z) = alpha0(t) exp(z . beta)``
and ``integral_a^b alpha = log F(b) - log F(a)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy import special

from .core import OptimizerConfig, SubjectRecord
from .optimize import nelder_mead_maximize
from .results import FitResult

U0_LOG_FLOOR = -30.0


class _DelayFree:
    """Marker for transitions that are reported instantly (``pr_U == 1``)."""

    def __repr__(self):
        return "DELAY_FREE"

    def __reduce__(self):
        return "DELAY_FREE"


DELAY_FREE = _DelayFree()


def _covariates(z, n_beta):
    z = np.asarray(z, dtype=float)
    if n_beta == 0:
        return np.zeros(z.shape[:-1] if z.ndim else ())
    return z[..., :n_beta] if z.ndim else np.atleast_1d(z)


@dataclass(frozen=True)
class DelayModel:
    """Weibull baseline: ``F0(t) = 1 - exp(-(lam t)^shape)``."""

    lam: float
    shape: float
    beta: tuple[float, ...] = (0.0,)
    family: str = field(default="weibull", init=False)

    def __post_init__(self):
        object.__setattr__(self, "beta", tuple(float(b) for b in np.atleast_1d(self.beta)))
        if self.lam <= 0 or self.shape <= 0:
            raise ValueError("scale and shape must be positive")

    # parameter vector helpers -------------------------------------------------
    @property
    def params(self) -> np.ndarray:
        return np.array([self.lam, self.shape, *self.beta])

    @property
    def param_names(self) -> list[str]:
        return ["lam", "shape"] + [f"beta{i}" for i in range(len(self.beta))]

    def with_params(self, p) -> DelayModel:
        return replace(self, lam=float(p[0]), shape=float(p[1]), beta=tuple(float(v) for v in p[2:]))

    def to_internal(self) -> np.ndarray:
        return np.array([math.log(self.lam), math.log(self.shape), *self.beta])

    def from_internal(self, z) -> DelayModel:
        return self.with_params([math.exp(z[0]), math.exp(z[1]), *z[2:]])

    def multiplier(self, z) -> np.ndarray:
        zb = np.asarray(z, dtype=float)
        if zb.ndim == 0:
            zb = zb[None]
        return np.exp(zb[..., : len(self.beta)] @ np.asarray(self.beta))

    # baseline -----------------------------------------------------------------
    def base_log_cdf(self, t):
        t = np.asarray(t, dtype=float)
        with np.errstate(divide="ignore"):
            return np.log(-np.expm1(-(self.lam * t) ** self.shape))

    def base_log_reverse_hazard(self, t):
        t = np.asarray(t, dtype=float)
        y = (self.lam * t) ** self.shape
        with np.errstate(divide="ignore", invalid="ignore"):
            return math.log(self.shape) + self.shape * math.log(self.lam) + (self.shape - 1) * np.log(t) - np.log(np.expm1(y))

    def base_quantile(self, p):
        return (-np.log1p(-np.asarray(p, dtype=float))) ** (1.0 / self.shape) / self.lam

    # public API ---------------------------------------------------------------
    def log_cdf(self, t, z):
        t = np.asarray(t, dtype=float)
        out = self.multiplier(z) * self.base_log_cdf(np.where(np.isinf(t), 1.0, t))
        return np.where(np.isinf(t), 0.0, out)

    def cdf(self, t, z):
        return np.exp(self.log_cdf(t, z))

    def reverse_hazard(self, t, z):
        t = np.asarray(t, dtype=float)
        if np.any(t <= 0):
            raise ValueError("the reverse-time hazard is infinite at t = 0")
        return np.exp(self.log_reverse_hazard(t, z))

    def log_reverse_hazard(self, t, z):
        return np.log(self.multiplier(z)) + self.base_log_reverse_hazard(t)

    def cumulative_reverse_hazard(self, a, b, z):
        """Integral of the reverse-time hazard over ``[a, b]``."""
        return self.log_cdf(b, z) - self.log_cdf(a, z)

    def log_density(self, t, z):
        return self.log_reverse_hazard(t, z) + self.log_cdf(t, z)

    def sample(self, z, rng: np.random.Generator, size=None):
        """Inverse-transform draw; the uniform variate lies in the open unit interval."""
        w = rng.uniform(np.nextafter(0.0, 1.0), 1.0, size=size)
        c = self.multiplier(z)
        return self.base_quantile(w ** (1.0 / c))

    def describe(self) -> dict:
        return {"family": self.family, "lam": self.lam, "shape": self.shape, "beta": list(self.beta)}


@dataclass(frozen=True)
class GammaDelayModel(DelayModel):
    """Gamma baseline with shape ``shape`` and rate ``lam``; reverse-time hazard from density/CDF."""

    family: str = field(default="gamma", init=False)

    def base_log_cdf(self, t):
        t = np.asarray(t, dtype=float)
        with np.errstate(divide="ignore"):
            return np.log(special.gammainc(self.shape, self.lam * t))

    def base_log_reverse_hazard(self, t):
        t = np.asarray(t, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            log_pdf = (self.shape * math.log(self.lam) + (self.shape - 1) * np.log(t) - self.lam * t
                       - special.gammaln(self.shape))
            return log_pdf - self.base_log_cdf(t)

    def base_quantile(self, p):
        return special.gammaincinv(self.shape, np.asarray(p, dtype=float)) / self.lam


def delay_cdf(model: DelayModel, t, x):
    return model.cdf(t, x)


def reverse_hazard(model: DelayModel, t, x):
    return model.reverse_hazard(t, x)


def sample_delay(model: DelayModel, x, rng: np.random.Generator, size=None):
    return model.sample(x, rng, size)


def delay_model_from_dict(d: Mapping) -> DelayModel | _DelayFree:
    if d.get("family") in (None, "none", "delay_free"):
        return DELAY_FREE
    cls = GammaDelayModel if d["family"] == "gamma" else DelayModel
    return cls(float(d["lam"]), float(d["shape"]), tuple(d.get("beta", (0.0,))))


# ---------------------------------------------------------------------------
# likelihood


def event_transitions(record: SubjectRecord, include_last: bool = True):
    """``(event, (origin, mark))`` for events on the kept path."""
    state = record.initial_state
    out = []
    for ev in record.kept_events(include_last):
        out.append((ev, (state, ev.mark)))
        state = ev.mark
    return out


def _event_term(model: DelayModel, ev, x, eta: float, floor: float) -> float:
    if ev.delay <= 0.0:
        return floor
    window = eta - ev.time
    return float(model.log_density(ev.delay, x) - model.log_cdf(window, x))


def delay_loglik(record: SubjectRecord, models: Mapping, eta: float, include_last: bool = True,
                 floor: float = U0_LOG_FLOOR) -> float:
    """Right-truncated delay log-likelihood of one subject.

    ``models`` maps a transition ``(j, k)`` to a delay model or
    ``DELAY_FREE``; transitions absent from the mapping are treated as
    delay-free. With ``include_last=False`` the last reported event is
    dropped (the branch where it is eventually rejected).
    """
    total = 0.0
    x = record.x
    for ev, tr in event_transitions(record, include_last):
        model = models.get(tr, DELAY_FREE)
        if model is DELAY_FREE:
            continue
        total += _event_term(model, ev, x, eta, floor)
    return total


def imputed_delay_loglik(record: SubjectRecord, models: Mapping, eta: float, w1: float,
                         floor: float = U0_LOG_FLOOR) -> float:
    if not 0.0 <= w1 <= 1.0:
        raise ValueError("w1 must be a probability")
    if not record.last_pending:
        return delay_loglik(record, models, eta, True, floor)
    return (1.0 - w1) * delay_loglik(record, models, eta, False, floor) + w1 * delay_loglik(record, models, eta, True, floor)


@dataclass
class DelayObservations:
    """Stacked delay observations for one transition."""

    delay: np.ndarray
    window: np.ndarray
    z: np.ndarray
    weight: np.ndarray
    subject: np.ndarray = None
    pending: np.ndarray = None

    def reweighted(self, weights=None, counts=None) -> DelayObservations:
        """New weights: ``weights`` (imputation, one per record) for pending rows, times ``counts``."""
        w = np.ones(self.delay.size)
        if weights is not None:
            w = np.where(self.pending, np.asarray(weights, dtype=float)[self.subject], 1.0)
        if counts is not None:
            w = w * np.asarray(counts, dtype=float)[self.subject]
        return DelayObservations(self.delay, self.window, self.z, w, self.subject, self.pending)


def collect_delay_observations(records: Sequence[SubjectRecord], weights: Sequence[float], eta: float,
                               transitions) -> dict[tuple[int, int], DelayObservations]:
    """Gather (U, eta - T, covariates, imputation weight) per delayed transition."""
    rows: dict[tuple[int, int], list] = {tr: [] for tr in transitions}
    if weights is None:
        weights = np.ones(len(records))
    for n, (rec, w1) in enumerate(zip(records, weights)):
        evs = event_transitions(rec, include_last=True)
        for i, (ev, tr) in enumerate(evs):
            if tr not in rows:
                continue
            pending = rec.last_pending and i == len(evs) - 1
            rows[tr].append((ev.delay, eta - ev.time, rec.covariates, w1 if pending else 1.0, n, pending))
    out = {}
    for tr, r in rows.items():
        if not r:
            out[tr] = DelayObservations(np.zeros(0), np.zeros(0), np.zeros((0, 1)), np.zeros(0),
                                        np.zeros(0, dtype=int), np.zeros(0, dtype=bool))
            continue
        u, win, z, w, subj, pend = zip(*r)
        out[tr] = DelayObservations(np.array(u), np.array(win), np.array(z, dtype=float), np.array(w, dtype=float),
                                    np.array(subj, dtype=int), np.array(pend, dtype=bool))
    return out


def weighted_delay_loglik(model: DelayModel, obs: DelayObservations, floor: float = U0_LOG_FLOOR) -> float:
    if obs.delay.size == 0:
        return 0.0
    pos = (obs.delay > 0) & (obs.weight > 0)
    val = np.full(obs.delay.shape, floor)
    if np.any(pos):
        val[pos] = model.log_density(obs.delay[pos], obs.z[pos]) - model.log_cdf(obs.window[pos], obs.z[pos])
    return float(np.sum(np.where(obs.weight > 0, obs.weight * val, 0.0)))


def fit_delay_model(records: Sequence[SubjectRecord], weights: Sequence[float], start: Mapping,
                    eta: float, opt: OptimizerConfig | None = None, fixed: Mapping | None = None,
                    counts=None, observations: Mapping | None = None) -> FitResult:
    """Maximize the summed imputed delay log-likelihood, one delay model per transition.

    ``start`` maps transitions to starting :class:`DelayModel` objects
    (``DELAY_FREE`` entries are skipped). ``fixed`` optionally maps a
    transition to parameter names held at their start values. Precompiled
    ``observations`` (from :func:`collect_delay_observations`) are reweighted
    with ``weights`` and ``counts`` instead of being rebuilt.
    """
    opt = opt or OptimizerConfig()
    fixed = fixed or {}
    transitions = [tr for tr, m in start.items() if m is not DELAY_FREE]
    if observations is None:
        observations = collect_delay_observations(records, None, eta, transitions)
    obs = {tr: observations[tr].reweighted(weights, counts) for tr in transitions}
    if not transitions or all(float(np.sum(obs[tr].weight)) <= 0 for tr in transitions):
        raise ValueError("no reported event with positive weight: the delay model is not identified")
    res = FitResult(warm_start="start")
    fitted = {}
    params, names = [], []
    for tr in sorted(transitions):
        model0 = start[tr]
        o = obs[tr]
        key = f"f{tr[0]}{tr[1]}"
        if float(np.sum(o.weight)) <= 0:
            fitted[tr] = model0
            res.diagnostics[key] = _flag("no delay observations")
        else:
            z0 = model0.to_internal()
            free = np.array([n not in fixed.get(tr, ()) for n in model0.param_names])

            def objective(zf, model0=model0, z0=z0, free=free, o=o):
                z = z0.copy()
                z[free] = zf
                try:
                    m = model0.from_internal(z)
                except (ValueError, OverflowError):
                    return -math.inf
                with np.errstate(all="ignore"):
                    return weighted_delay_loglik(m, o)

            zf, val, diag = nelder_mead_maximize(objective, z0[free], opt)
            z = z0.copy()
            z[free] = zf
            fitted[tr] = model0.from_internal(z)
            res.objective[key] = val
            res.diagnostics[key] = diag
        params.extend(fitted[tr].params)
        names.extend(f"{key}.{n}" for n in fitted[tr].param_names)
    res.blocks["f"] = np.array(params)
    res.names["f"] = names
    res.models["delay"] = {**{tr: m for tr, m in start.items() if m is DELAY_FREE}, **fitted}
    return res


def _flag(msg):
    from .core import FitDiagnostics

    d = FitDiagnostics(converged=True, message=msg)
    d.flags.append(msg)
    return d
