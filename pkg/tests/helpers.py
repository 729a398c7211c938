from __future__ import annotations

import math

import numpy as np

from msthin.core import AdjudicationTrack, Dataset, Outcome, ReportedEvent, StateSpace, SubjectRecord
from msthin.delay import DELAY_FREE, DelayModel
from msthin.hazards import family_from_spec
from msthin.likelihood import EventModel


def constant_model(rates: dict, delays: dict | None = None, labels=None) -> EventModel:
    """Event model with constant hazards ``rates[(j, k)]``."""
    n = max(max(tr) for tr in rates)
    labels = labels or [f"s{i}" for i in range(1, n + 1)]
    space = StateSpace.build(labels, list(rates))
    return EventModel(space, {tr: family_from_spec("loglinear:intercept") for tr in rates},
                      {tr: (math.log(c),) for tr, c in rates.items()}, delays or {})


def confirmed(t, mark, u=0.0):
    return ReportedEvent(t, mark, u)


def adjudicated(t, mark, u, transitions=(), outcome=Outcome.PENDING, start=1):
    out_t = None if outcome is Outcome.PENDING else transitions[-1][0]
    return ReportedEvent(t, mark, u, AdjudicationTrack(t + u, start, tuple(transitions), outcome, out_t))


def record(events=(), x=0.0, V=0.0, C=5.0, sid="a"):
    return SubjectRecord(sid, (x,), V, C, 1, tuple(events))


def dataset(records, eta=5.0):
    return Dataset(tuple(records), eta, 1)
