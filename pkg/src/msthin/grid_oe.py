"""Grid data: the CSV record format and occurrence-exposure (O/E) tables.

CSV layout, one row per reported event (a subject without events gets a
single row with ``event_index`` 0 and empty event fields)::

    subject_id,covariate_1,...,covariate_p,V,C,event_index,T,Y,U,adj_state_seq,adj_time_seq,outcome

Times are written with six decimals. ``adj_state_seq`` lists the
adjudication states starting with the initial one, ``adj_time_seq`` the
times of the subsequent transitions (the track starts at ``T + U``), both
``;``-separated; they are empty for events not subject to adjudication.
``outcome`` is ``C``, ``R`` or ``P``.

O/E tables discretize the likelihoods on a partition ``0 = t_0 < ... < t_A``.
Hazards are evaluated at one representative point per bucket: the left
endpoint for event and adjudication hazards, the midpoint for the
reverse-time hazard of the delays (which is infinite at 0). Within a
bucket the log-likelihood is ``O log rate - rate E``, a Poisson regression
with offset ``log E``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Hashable, Mapping, Sequence

import numpy as np

from .adjudication import collect_sojourns
from .core import AdjudicationTrack, Dataset, DataError, Outcome, ReportedEvent, SubjectRecord
from .delay import collect_delay_observations
from .hazards import Context
from .likelihood import branch_sojourns, branch_weights

TIME_FMT = "{:.6f}"
TARGETS = ("events", "delays", "adjudication")


class DegenerateCellError(ValueError):
    """A cell has occurrences but no exposure."""


# ---------------------------------------------------------------------------
# CSV


def _t(v: float) -> str:
    return TIME_FMT.format(v)


def _q(v: float) -> float:
    return float(_t(v))


def header(p: int) -> list[str]:
    return (["subject_id"] + [f"covariate_{i + 1}" for i in range(p)]
            + ["V", "C", "event_index", "T", "Y", "U", "adj_state_seq", "adj_time_seq", "outcome"])


def _rows(rec: SubjectRecord):
    head = [rec.subject_id] + [repr(float(c)) for c in rec.covariates] + [_t(rec.V), _t(rec.C)]
    if not rec.events:
        yield head + ["0", "", "", "", "", "", ""]
        return
    for i, ev in enumerate(rec.events, start=1):
        if ev.track is None:
            states, times = "", ""
        else:
            states = ";".join(str(s) for s in [ev.track.initial_state] + [s for _, s in ev.track.transitions])
            times = ";".join(_t(tau) for tau, _ in ev.track.transitions)
        yield head + [str(i), _t(ev.time), str(ev.mark), _t(ev.delay), states, times, ev.outcome.value]


def write_csv(records: Dataset | Sequence[SubjectRecord], path) -> Path:
    """Write records in the CSV layout of this module."""
    recs = list(records)
    p = len(recs[0].covariates) if recs else (records.num_covariates if isinstance(records, Dataset) else 1)
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header(p))
        for rec in recs:
            w.writerows(_rows(rec))
    return path


def quantize_record(rec: SubjectRecord) -> SubjectRecord:
    """The record as it reads back from CSV (times rounded to six decimals)."""
    evs = []
    for ev in rec.events:
        T, U = _q(ev.time), _q(ev.delay)
        track = None
        if ev.track is not None:
            tr = ev.track
            trans = tuple((_q(tau), s) for tau, s in tr.transitions)
            track = AdjudicationTrack(T + U, tr.initial_state, trans, tr.outcome,
                                      None if tr.outcome is Outcome.PENDING else trans[-1][0])
        evs.append(ReportedEvent(T, ev.mark, U, track))
    return SubjectRecord(rec.subject_id, rec.covariates, _q(rec.V), _q(rec.C), rec.initial_state, tuple(evs))


def _float(s: str, what: str) -> float:
    try:
        v = float(s)
    except ValueError:
        raise ValueError(f"{what} is not a number: {s!r}") from None
    if not math.isfinite(v):
        raise ValueError(f"{what} is not finite")
    return v


def _parse_event(row: dict, eta: float) -> ReportedEvent:
    T = _float(row["T"], "T")
    U = _float(row["U"], "U")
    try:
        Y = int(row["Y"])
    except ValueError:
        raise ValueError(f"Y is not a state label: {row['Y']!r}") from None
    if T + U > eta + 1e-12:
        raise ValueError(f"event reported after eta (T+U = {T + U:.6f} > {eta})")
    outcome = row["outcome"]
    if outcome not in ("C", "R", "P"):
        raise ValueError(f"outcome must be C, R or P, got {outcome!r}")
    if not row["adj_state_seq"]:
        if row["adj_time_seq"] or outcome != "C":
            raise ValueError("an event without adjudication states must have outcome C and no times")
        return ReportedEvent(T, Y, U)
    states = [int(s) for s in row["adj_state_seq"].split(";")]
    times = [_float(s, "adjudication time") for s in row["adj_time_seq"].split(";")] if row["adj_time_seq"] else []
    if len(times) != len(states) - 1:
        raise ValueError("adj_time_seq needs one time per adjudication transition")
    out = Outcome(outcome)
    track = AdjudicationTrack(T + U, states[0], tuple(zip(times, states[1:])), out,
                              None if out is Outcome.PENDING else (times[-1] if times else None))
    return ReportedEvent(T, Y, U, track)


def read_csv(path, eta: float, initial_state: int = 1) -> Dataset:
    """Parse and validate a CSV file; errors name the offending line."""
    path = Path(path)
    records: list[SubjectRecord] = []
    seen: set[str] = set()
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            head = next(reader)
        except StopIteration:
            raise DataError(f"{path}: missing header") from None
        p = sum(h.startswith("covariate_") for h in head)
        if head != header(p):
            raise DataError(f"{path}:1: header does not match the schema {','.join(header(p))}")
        current, rows, first_line = None, [], 0

        def flush():
            if current is None:
                return
            if current in seen:
                raise DataError(f"{path}:{first_line}: duplicate subject {current!r}")
            seen.add(current)
            r0 = rows[0][1]
            try:
                x = tuple(_float(r0[f"covariate_{i + 1}"], f"covariate_{i + 1}") for i in range(p))
                V, C = _float(r0["V"], "V"), _float(r0["C"], "C")
                events = []
                for k, (line, r) in enumerate(rows, start=1):
                    if (r["V"], r["C"]) != (r0["V"], r0["C"]):
                        raise DataError(f"line {line}: V and C differ between rows of one subject")
                    if r["event_index"] == "0":
                        if len(rows) != 1 or any(r[c] for c in ("T", "Y", "U", "adj_state_seq", "adj_time_seq",
                                                                 "outcome")):
                            raise DataError(f"line {line}: event_index 0 marks a subject without events")
                        continue
                    if r["event_index"] != str(k):
                        raise DataError(f"line {line}: event_index {r['event_index']} out of order (expected {k})")
                    try:
                        events.append(_parse_event(r, eta))
                    except (ValueError, KeyError) as exc:
                        raise DataError(f"line {line}: {exc}") from None
                if C > eta + 1e-12:
                    raise DataError(f"line {first_line}: censoring time after eta")
                records.append(SubjectRecord(current, x, V, C, initial_state, tuple(events)))
            except DataError as exc:
                msg = str(exc)
                raise DataError(f"{path}:{msg}" if msg.startswith("line") else f"{path}:{first_line}: {msg}") from None
            except ValueError as exc:
                raise DataError(f"{path}:{first_line}: {exc}") from None

        for line, values in enumerate(reader, start=2):
            if not values:
                continue
            if len(values) != len(head):
                raise DataError(f"{path}:{line}: expected {len(head)} fields, got {len(values)}")
            row = dict(zip(head, values))
            if row["subject_id"] != current:
                flush()
                current, rows, first_line = row["subject_id"], [], line
            rows.append((line, row))
        flush()
    return Dataset(tuple(records), eta, p if records else max(p, 1))


def write_truth_csv(truth, path) -> Path:
    """Simulated truth (all jumps with true origin, delay, confirmation indicator and adjudication)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "covariate_1", "V", "C", "event_index", "T", "origin", "Y", "U", "xi",
                    "adj_state_seq", "adj_time_seq", "outcome"])
        for rec in truth:
            head = [rec.subject_id, repr(float(rec.x)), _t(rec.V), _t(rec.C)]
            if not rec.events:
                w.writerow(head + ["0"] + [""] * 8)
            for i, e in enumerate(rec.events, start=1):
                if e.track is None:
                    states, times, out = "", "", "C"
                else:
                    states = ";".join(str(s) for s in [e.track.initial_state] + [s for _, s in e.track.transitions])
                    times = ";".join(_t(tau) for tau, _ in e.track.transitions)
                    out = e.track.outcome.value
                w.writerow(head + [str(i), _t(e.time), str(e.origin), str(e.mark), _t(e.delay), str(e.xi),
                                   states, times, out])
    return path


# ---------------------------------------------------------------------------
# occurrence-exposure tables


@dataclass
class OETable:
    """Occurrences per ``(transition, stratum)`` and exposures per ``(group, stratum)``, one value per bucket.

    The exposure group is the origin state for event and adjudication
    tables and the transition itself for delay tables. ``strata`` maps a
    stratum key to its representative covariate vector.
    """

    target: str
    partition: np.ndarray
    points: np.ndarray
    occurrence: dict = field(default_factory=dict)
    exposure: dict = field(default_factory=dict)
    strata: dict = field(default_factory=dict)

    @property
    def n_buckets(self) -> int:
        return self.partition.size - 1

    def group(self, tr) -> Hashable:
        return tr if self.target == "delays" else tr[0]

    def transitions(self) -> list:
        return sorted({tr for tr, _ in self.occurrence})

    def cell_arrays(self, tr, stratum) -> tuple[np.ndarray, np.ndarray]:
        zero = np.zeros(self.n_buckets)
        return self.occurrence.get((tr, stratum), zero), self.exposure.get((self.group(tr), stratum), zero)

    def _add(self, store, key, a, vals):
        arr = store.get(key)
        if arr is None:
            arr = store[key] = np.zeros(self.n_buckets)
        arr[a] += vals

    def merge(self, other: OETable) -> OETable:
        """Cell-wise sum of two tables on the same partition."""
        if self.target != other.target or not np.array_equal(self.partition, other.partition):
            raise ValueError("tables differ in target or partition")
        out = OETable(self.target, self.partition, self.points, {k: v.copy() for k, v in self.occurrence.items()},
                      {k: v.copy() for k, v in self.exposure.items()}, dict(self.strata))
        for k, v in other.occurrence.items():
            out._add(out.occurrence, k, slice(None), v)
        for k, v in other.exposure.items():
            out._add(out.exposure, k, slice(None), v)
        out.strata.update(other.strata)
        return out

    def total_occurrences(self, tr) -> float:
        return float(sum(v.sum() for (t, _), v in self.occurrence.items() if t == tr))

    def total_exposure(self, group) -> float:
        return float(sum(v.sum() for (g, _), v in self.exposure.items() if g == group))


def monthly_partition(eta: float, per_year: int = 12) -> np.ndarray:
    A = max(int(round(per_year * eta)), 1)
    return np.linspace(0.0, eta, A + 1)


def _check_partition(partition) -> np.ndarray:
    p = np.asarray(partition, dtype=float)
    if p.ndim != 1 or p.size < 2 or not np.all(np.diff(p) > 0):
        raise ValueError("partition must be strictly increasing with at least two points")
    return p


def _spread(table: OETable, key, lo: float, hi: float, w: float):
    p = table.partition
    if lo < p[0] - 1e-9 or hi > p[-1] + 1e-9:
        raise DataError(f"interval [{lo}, {hi}] outside the partition [{p[0]}, {p[-1]}]")
    if hi <= lo or w == 0:
        return
    i0 = max(int(np.searchsorted(p, lo, "right")) - 1, 0)
    i1 = min(int(np.searchsorted(p, hi, "left")), table.n_buckets)
    idx = np.arange(i0, i1)
    overlap = np.minimum(hi, p[idx + 1]) - np.maximum(lo, p[idx])
    table._add(table.exposure, key, idx, w * np.maximum(overlap, 0.0))


def _bucket(table: OETable, t: float) -> int:
    p = table.partition
    if t < p[0] - 1e-9 or t > p[-1] + 1e-9:
        raise DataError(f"occurrence at {t} outside the partition")
    return min(max(int(np.searchsorted(p, t, "left")) - 1, 0), table.n_buckets - 1)


def _stratum(table: OETable, stratify, x: tuple, members: dict):
    key = tuple(x) if stratify is None else stratify(np.asarray(x))
    members.setdefault(key, []).append(x)
    return key


def discretize(data: Dataset, partition=None, target: str = "events", weights=None, transitions=None,
               stratify: Callable | None = None) -> OETable:
    """Occurrence-exposure table of ``data`` on ``partition`` (monthly over ``[0, eta]`` by default).

    Parameters
    ----------
    target : {"events", "delays", "adjudication"}
        events: calendar time, sojourns of the event path with the pending
        last jump split into its two branches by ``weights``; delays:
        delay scale, exposure ``[U, eta - T]`` per reported jump;
        adjudication: time since report, sojourns of the adjudication tracks.
    weights : array_like, optional
        Imputation weights ``w(1, Z)`` per record (default 1).
    transitions : list, optional
        Delayed transitions (delays target only).
    stratify : callable, optional
        Maps a covariate vector to a stratum key; by default every distinct
        covariate vector is its own stratum.
    """
    if target not in TARGETS:
        raise ValueError(f"target must be one of {TARGETS}")
    p = _check_partition(monthly_partition(data.eta) if partition is None else partition)
    pts = 0.5 * (p[:-1] + p[1:]) if target == "delays" else p[:-1].copy()
    table = OETable(target, p, pts)
    recs = data.records
    w1 = np.ones(len(recs)) if weights is None else np.asarray(weights, dtype=float)
    members: dict = {}
    if target == "events":
        for i, rec in enumerate(recs):
            s = _stratum(table, stratify, rec.covariates, members)
            for (j, a, b, _, to, _), tag in branch_sojourns(rec):
                w = float(branch_weights(np.array(tag), w1[i]))
                _spread(table, (j, s), a, b, w)
                if to and w:
                    table._add(table.occurrence, ((j, to), s), _bucket(table, b), w)
    elif target == "delays":
        if transitions is None:
            raise ValueError("the delays target needs the delayed transitions")
        obs = collect_delay_observations(recs, w1, data.eta, transitions)
        for tr, o in obs.items():
            for k in range(o.delay.size):
                s = _stratum(table, stratify, tuple(o.z[k]), members)
                _spread(table, (tr, s), o.delay[k], o.window[k], o.weight[k])
                if o.weight[k]:
                    table._add(table.occurrence, (tr, s), _bucket(table, o.delay[k]), o.weight[k])
    else:
        soj = collect_sojourns(recs, data.eta)
        for k in range(len(soj)):
            s = _stratum(table, stratify, tuple(soj.x[k]), members)
            lo, hi = soj.a[k] - soj.report[k], soj.b[k] - soj.report[k]
            j = int(soj.state[k])
            _spread(table, (j, s), lo, hi, 1.0)
            if soj.to[k]:
                table._add(table.occurrence, ((j, int(soj.to[k])), s), _bucket(table, hi), 1.0)
    table.strata = {k: np.mean(np.asarray(v, dtype=float), axis=0) for k, v in members.items()}
    return table


# ---------------------------------------------------------------------------
# likelihood and reports


def hazard_rate(family, params) -> Callable:
    """Rate callable ``(points, x) -> rates`` for an event or adjudication hazard.

    Duration and time since report are both taken equal to the bucket point
    (exact for sojourns that start at time 0 of the table's clock).
    """
    params = np.asarray(params, dtype=float)

    def rate(t, x):
        t = np.asarray(t, dtype=float)
        x = np.broadcast_to(np.asarray(x, dtype=float), t.shape + (np.size(x),))
        return family.rate(params, Context(t=t, d=t, x=x, r=t, e=t, u=np.zeros_like(t)))

    return rate


def reverse_hazard_rate(model) -> Callable:
    """Rate callable for the reverse-time hazard of a delay model."""

    def rate(t, x):
        t = np.asarray(t, dtype=float)
        return model.reverse_hazard(t, np.broadcast_to(np.asarray(x, dtype=float), t.shape + (np.size(x),)))

    return rate


def oe_loglik(table: OETable, tr, rate: Callable, reporting: Callable | None = None) -> float:
    """``sum O log rate - rate E`` over the cells of transition ``tr``.

    ``reporting(points, x)`` optionally multiplies the exposure (the
    probability that a jump at the bucket point is reported by ``eta``).
    """
    total = 0.0
    for s, x in table.strata.items():
        O, E = table.cell_arrays(tr, s)
        if np.any((O > 0) & (E <= 0)):
            raise DegenerateCellError(f"transition {tr}, stratum {s}: occurrences without exposure")
        live = E > 0
        if not live.any():
            continue
        pts = table.points[live]
        r = np.asarray(rate(pts, x), dtype=float)
        e = E[live] if reporting is None else E[live] * np.asarray(reporting(pts, x), dtype=float)
        o = O[live]
        with np.errstate(divide="ignore", invalid="ignore"):
            term = np.where(o > 0, o * np.log(r), 0.0) - r * e
        total += float(np.sum(term))
    return total if math.isfinite(total) else -math.inf


def oe_rates_report(table: OETable, rates: Mapping | None = None, aggregate: bool = False) -> list[dict]:
    """Empirical O/E rates per bucket and stratum next to fitted rates.

    ``rates`` maps a transition to a rate callable. With ``aggregate`` the
    strata are pooled: occurrences and exposures are summed, the fitted
    rate and the covariate mean are exposure weighted (the covariate mean
    shows the changing mix behind jagged pooled curves).
    """
    rates = rates or {}
    rows = []
    p = table.partition
    for tr in sorted(set(table.transitions()) | set(rates)):
        per = []
        for s, x in table.strata.items():
            O, E = table.cell_arrays(tr, s)
            fit = np.asarray(rates[tr](table.points, x), dtype=float) if tr in rates else None
            per.append((s, x, O, E, fit))
        if aggregate:
            O = sum(v[2] for v in per)
            E = sum(v[3] for v in per)
            Esafe = np.where(E > 0, E, 1.0)
            xbar = sum(np.outer(v[3], np.atleast_1d(v[1])) for v in per) / Esafe[:, None]
            fit = None
            if tr in rates:
                fit_w = sum(v[3] * v[4] for v in per) / Esafe
                fit_m = sum(v[4] for v in per) / len(per)
                fit = np.where(E > 0, fit_w, fit_m)
            per = [("all", None, O, E, fit)]
        for s, x, O, E, fit in per:
            for a in range(table.n_buckets):
                if O[a] == 0 and E[a] == 0 and fit is None:
                    continue
                xa = xbar[a] if aggregate else np.atleast_1d(x)
                rows.append({
                    "transition": f"{tr[0]}-{tr[1]}", "bucket": a, "start": p[a], "end": p[a + 1],
                    "point": table.points[a], "stratum": str(s), "x": ";".join(f"{v:.6f}" for v in xa),
                    "occurrences": O[a], "exposure": E[a],
                    "empirical": O[a] / E[a] if E[a] > 0 else None,
                    "fitted": None if fit is None else float(fit[a]),
                })
    return rows


def write_rates_report(rows: list[dict], path) -> Path:
    path = Path(path)
    cols = ["transition", "bucket", "start", "end", "point", "stratum", "x", "occurrences", "exposure",
            "empirical", "fitted"]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            out = []
            for c in cols:
                v = r[c]
                if v is None:
                    out.append("")
                elif isinstance(v, float):
                    out.append(f"{v:.10g}")
                else:
                    out.append(str(v))
            w.writerow(out)
    return path
