"""Domain types: state spaces, event paths, subject records and configuration.

States are labelled by 1-based integers throughout. Times are in years.
All types are immutable after construction; constructors validate the
record-level invariants (monotone reporting, at most one pending
adjudication per subject) so that every record in circulation is usable by
the likelihood code without further checks.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class DataError(ValueError):
    """Raised when a record violates a structural invariant."""


class NumericalError(ArithmeticError):
    """Raised when a numerical routine cannot produce a finite answer."""


class Outcome(str, enum.Enum):
    CONFIRMED = "C"
    REJECTED = "R"
    PENDING = "P"


@dataclass(frozen=True)
class StateSpace:
    num_states: int
    labels: tuple[str, ...]
    allowed_transitions: frozenset[tuple[int, int]]

    def __post_init__(self):
        if self.num_states < 2:
            raise DataError("a state space needs at least two states")
        if len(self.labels) != self.num_states or len(set(self.labels)) != self.num_states:
            raise DataError("labels must be unique, one per state")
        for j, k in self.allowed_transitions:
            if not (1 <= j <= self.num_states and 1 <= k <= self.num_states) or j == k:
                raise DataError(f"invalid transition {(j, k)}")

    @classmethod
    def build(cls, labels: Sequence[str], transitions: Iterable[tuple[int, int]]) -> StateSpace:
        return cls(len(labels), tuple(labels), frozenset(tuple(t) for t in transitions))

    def exits(self, j: int) -> list[tuple[int, int]]:
        return sorted(tr for tr in self.allowed_transitions if tr[0] == j)

    def is_absorbing(self, j: int) -> bool:
        return not self.exits(j)

    def topological_order(self) -> list[int]:
        """States ordered so that every transition goes forward.

        Raises ``DataError`` for cyclic transition structures.
        """
        indeg = {s: 0 for s in range(1, self.num_states + 1)}
        for _, k in self.allowed_transitions:
            indeg[k] += 1
        order, ready = [], sorted(s for s, n in indeg.items() if n == 0)
        while ready:
            s = ready.pop(0)
            order.append(s)
            for _, k in self.exits(s):
                indeg[k] -= 1
                if indeg[k] == 0:
                    ready.append(k)
            ready.sort()
        if len(order) != self.num_states:
            raise DataError("transition structure contains a cycle")
        return order


@dataclass(frozen=True)
class EventPath:
    initial_state: int
    jumps: tuple[tuple[float, int], ...] = ()

    def __post_init__(self):
        prev_t, prev_s = -math.inf, self.initial_state
        for t, s in self.jumps:
            if t < 0 or t <= prev_t:
                raise DataError("jump times must be nonnegative and strictly increasing")
            if s == prev_s:
                raise DataError("consecutive marks must differ")
            prev_t, prev_s = t, s

    def state_at(self, t: float) -> tuple[int, float]:
        return path_state_at(self, t)

    @property
    def final_state(self) -> int:
        return self.jumps[-1][1] if self.jumps else self.initial_state


def path_state_at(path: EventPath, t: float) -> tuple[int, float]:
    """Occupied state just before ``t`` and the duration ``D(t-)``.

    A jump at exactly ``t`` has not yet taken effect (left limit).
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    state, since = path.initial_state, 0.0
    for tj, s in path.jumps:
        if tj < t:
            state, since = s, tj
        else:
            break
    return state, t - since


@dataclass(frozen=True)
class AdjudicationTrack:
    """Adjudication history of one reported event.

    ``transitions`` holds ``(time, state)`` pairs in the adjudication state
    space; the track starts in ``initial_state`` at ``report_time``.
    """

    report_time: float
    initial_state: int
    transitions: tuple[tuple[float, int], ...] = ()
    outcome: Outcome = Outcome.PENDING
    outcome_time: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "outcome", Outcome(self.outcome))
        prev = self.report_time
        for tau, _ in self.transitions:
            if tau <= prev:
                raise DataError("adjudication transition times must increase and exceed the report time")
            prev = tau
        if (self.outcome is Outcome.PENDING) != (self.outcome_time is None):
            raise DataError("outcome is pending iff the outcome time is absent")
        if self.outcome is not Outcome.PENDING:
            if not self.transitions or self.transitions[-1][0] != self.outcome_time:
                raise DataError("a decided outcome must coincide with the last adjudication transition")

    def state_at(self, t: float) -> tuple[int, float]:
        """Adjudication state just before ``t`` and time since entering it."""
        state, since = self.initial_state, self.report_time
        for tau, s in self.transitions:
            if tau < t:
                state, since = s, tau
            else:
                break
        return state, t - since


@dataclass(frozen=True)
class ReportedEvent:
    """A reported jump. ``track`` is ``None`` for transitions not subject to adjudication."""

    time: float
    mark: int
    delay: float
    track: AdjudicationTrack | None = None

    def __post_init__(self):
        if self.delay < 0:
            raise DataError("reporting delay must be nonnegative")
        if self.track is not None and not math.isclose(
            self.track.report_time, self.time + self.delay, rel_tol=0.0, abs_tol=1e-9
        ):
            raise DataError("adjudication must start at the report time")

    @property
    def report_time(self) -> float:
        return self.time + self.delay

    @property
    def outcome(self) -> Outcome:
        return Outcome.CONFIRMED if self.track is None else self.track.outcome


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    covariates: tuple[float, ...]
    V: float
    C: float
    initial_state: int
    events: tuple[ReportedEvent, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(float(c) for c in self.covariates))
        object.__setattr__(self, "events", tuple(self.events))
        if not (0 <= self.V < self.C):
            raise DataError(f"{self.subject_id}: need 0 <= V < C")
        prev_t, prev_r = -math.inf, -math.inf
        for ev in self.events:
            if not (self.V < ev.time <= self.C):
                raise DataError(f"{self.subject_id}: event time {ev.time} outside (V, C]")
            if ev.time <= prev_t:
                raise DataError(f"{self.subject_id}: event times must increase")
            if ev.report_time < prev_r - 1e-12:
                raise DataError(f"{self.subject_id}: reporting is not monotone")
            prev_t, prev_r = ev.time, ev.report_time
        for ev in self.events[:-1]:
            if ev.outcome is Outcome.PENDING:
                raise DataError(f"{self.subject_id}: only the last reported event may be pending")
        self.path(include_last=True)

    @property
    def x(self) -> np.ndarray:
        return np.asarray(self.covariates, dtype=float)

    @property
    def last_pending(self) -> bool:
        return bool(self.events) and self.events[-1].outcome is Outcome.PENDING

    def kept_events(self, include_last: bool = True) -> list[ReportedEvent]:
        """Events entering the event path: confirmed ones plus, optionally, a pending last one."""
        out = [ev for ev in self.events if ev.outcome is Outcome.CONFIRMED]
        if include_last and self.last_pending:
            out.append(self.events[-1])
        return out

    def path(self, include_last: bool = True) -> EventPath:
        try:
            return EventPath(self.initial_state, tuple((ev.time, ev.mark) for ev in self.kept_events(include_last)))
        except DataError as exc:
            raise DataError(f"{self.subject_id}: {exc}") from None


@dataclass(frozen=True)
class Dataset:
    records: tuple[SubjectRecord, ...]
    eta: float
    num_covariates: int = 1

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        seen = set()
        for rec in self.records:
            if rec.subject_id in seen:
                raise DataError(f"duplicate subject id {rec.subject_id}")
            seen.add(rec.subject_id)
            if len(rec.covariates) != self.num_covariates:
                raise DataError(f"{rec.subject_id}: expected {self.num_covariates} covariates")
            if rec.C > self.eta + 1e-12:
                raise DataError(f"{rec.subject_id}: censoring after the analysis time")
            for ev in rec.events:
                if ev.report_time > self.eta + 1e-12:
                    raise DataError(f"{rec.subject_id}: event reported after eta (T+U > eta)")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def subset(self, indices: Sequence[int]) -> Dataset:
        """Resample by index; duplicated subjects get suffixed ids."""
        counts: dict[int, int] = {}
        out = []
        for i in indices:
            rec = self.records[int(i)]
            c = counts.get(int(i), 0)
            counts[int(i)] = c + 1
            if c:
                rec = SubjectRecord(f"{rec.subject_id}#{c}", rec.covariates, rec.V, rec.C, rec.initial_state, rec.events)
            out.append(rec)
        return Dataset(tuple(out), self.eta, self.num_covariates)


@dataclass(frozen=True)
class QuadratureConfig:
    subintervals: int = 64

    def __post_init__(self):
        if self.subintervals < 2 or self.subintervals % 2:
            raise ValueError("Simpson's rule needs an even number (>= 2) of subintervals")


@dataclass(frozen=True)
class OptimizerConfig:
    max_iterations: int = 5000
    tolerance: float = 1e-8
    initial_step: float = 0.1
    restarts: int = 2

    def __post_init__(self):
        if self.tolerance <= 0 or self.initial_step <= 0:
            raise ValueError("tolerance and initial step must be positive")
        if self.max_iterations < 1 or self.restarts < 0:
            raise ValueError("invalid iteration or restart count")


def simpson_weights(m: int) -> np.ndarray:
    """Composite Simpson weights on ``m + 1`` equispaced nodes of [0, 1]."""
    w = np.ones(m + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w / (3.0 * m)


def simpson_nodes(a, b, m: int):
    """Nodes of shape ``(n, m+1)`` and matching weights for intervals ``[a_i, b_i]``."""
    a = np.asarray(a, dtype=float)[..., None]
    b = np.asarray(b, dtype=float)[..., None]
    u = np.linspace(0.0, 1.0, m + 1)
    return a + (b - a) * u, (b - a) * simpson_weights(m)


def cumulative_simpson_rows(y: np.ndarray, width: np.ndarray) -> np.ndarray:
    """Row-wise cumulative integral of ``y`` sampled on equispaced nodes.

    Even nodes use Simpson's rule, odd nodes add a third-order correction
    for the half panel, giving a table accurate to O(h^4) at the even nodes.
    """
    m = y.shape[-1] - 1
    h = np.asarray(width, dtype=float)[..., None] / m
    out = np.zeros_like(y)
    panels = h / 3.0 * (y[..., 0:-2:2] + 4.0 * y[..., 1:-1:2] + y[..., 2::2])
    out[..., 2::2] = np.cumsum(panels, axis=-1)
    # half panel [x_{2i}, x_{2i+1}] by the quadratic through the three panel nodes
    half = h / 12.0 * (5.0 * y[..., 0:-2:2] + 8.0 * y[..., 1:-1:2] - y[..., 2::2])
    out[..., 1:-1:2] = out[..., 0:-2:2] + half
    return out


@dataclass
class FitDiagnostics:
    iterations: int = 0
    evaluations: int = 0
    converged: bool = False
    restarts_used: int = 0
    message: str = ""
    flags: list[str] = field(default_factory=list)


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``(seed, key...)``, e.g. ``(seed, replication, subject)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))))
