"""Lewis/Ogata thinning for the first jump of an inhomogeneous intensity."""
from __future__ import annotations

from typing import Callable

import numpy as np


class EnvelopeError(RuntimeError):
    """The intensity exceeded the envelope that was supposed to dominate it."""


GRID_POINTS = 64
ENVELOPE_FACTOR = 1.5
MAX_DOUBLINGS = 30


def segment_edges(start: float, end: float, first: float = 1.0) -> np.ndarray:
    """Geometric partition of ``[start, end]``: widths 1, 1, 2, 4, ... (in units of ``first``)."""
    edges = [start]
    width = first
    while edges[-1] < end:
        edges.append(min(end, edges[-1] + width))
        if len(edges) > 2:
            width *= 2.0
    return np.array(edges)


def grid_envelope(intensity: Callable[[np.ndarray], np.ndarray], a: float, b: float) -> float:
    grid = np.linspace(a, b, GRID_POINTS)
    return ENVELOPE_FACTOR * float(np.max(intensity(grid)))


def lewis_thinning(intensity: Callable[[np.ndarray], np.ndarray], window: tuple[float, float],
                   rng: np.random.Generator, upper_bound: Callable[[float, float], float] | None = None,
                   strict: bool = False) -> float | None:
    """First point of a point process with the given intensity on ``(a, b]``.

    The envelope is piecewise constant over a geometric partition of the
    window. ``upper_bound(a, b)`` supplies the bound on a piece (default:
    1.5 x the maximum over a 64-point grid). A supplied bound is first
    checked on that grid, and every candidate is checked as well. An
    intensity value above the bound raises :class:`EnvelopeError` when
    ``strict``; otherwise the bound is doubled and the piece is redrawn.
    """
    a, b = window
    if not b > a:
        return None
    bound_fn = upper_bound or (lambda lo, hi: grid_envelope(intensity, lo, hi))
    edges = segment_edges(a, b)
    for lo, hi in zip(edges[:-1], edges[1:]):
        bound = bound_fn(lo, hi)
        if upper_bound is not None:
            peak = float(np.max(intensity(np.linspace(lo, hi, GRID_POINTS))))
            if peak > bound:
                if strict:
                    raise EnvelopeError(f"intensity {peak:.4g} exceeds envelope {bound:.4g}")
                bound = max(bound, 0.0)
                while bound < peak:
                    bound = 2.0 * bound if bound > 0 else peak
        if bound <= 0:
            continue
        for _ in range(MAX_DOUBLINGS):
            n = rng.poisson(bound * (hi - lo))
            if n == 0:
                break
            times = np.sort(rng.uniform(lo, hi, n))
            lam = intensity(times)
            u = rng.uniform(0.0, bound, n)
            if np.any(lam > bound):
                if strict:
                    raise EnvelopeError(f"intensity {lam.max():.4g} exceeds envelope {bound:.4g}")
                bound *= 2.0
                continue
            hit = np.nonzero(u <= lam)[0]
            if hit.size:
                return float(times[hit[0]])
            break
        else:
            raise EnvelopeError("envelope doubling did not terminate")
    return None
