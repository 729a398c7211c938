"""State-occupation probabilities, the expected-duration estimand and its error metrics.

Two solvers share one uniform time grid:

* duration-free (Markov) models: classical RK4 on the forward equations
  ``dP/dt = P Q(t)``, cycles allowed;
* acyclic semi-Markov models: the nested representation. Entry densities
  are propagated through the states in topological order,

      P_k(u) = int_0^u e_k(s) S_k(s, u) ds,

  with all integrals taken by a fourth-order composite rule on the grid
  (Simpson, with a 3/8 panel for odd node counts). When a state's exit
  hazards ignore calendar time, ``S_k(s, u)`` depends on ``u - s`` only
  and the integrals are convolutions, evaluated by FFT for all covariate
  values at once.

Cyclic models with duration dependence are rejected.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import integrate, signal

from .hazards import Context
from .likelihood import EventModel

DEFAULT_STEP = 1.0 / 512


class UnsupportedModelError(ValueError):
    """The transition structure is outside what the occupation solvers handle."""


# ---------------------------------------------------------------------------
# quadrature on a uniform grid


def cumulative_integral(y, h: float) -> np.ndarray:
    """``I[..., n] = int_0^{n h} y`` from samples at ``0, h, ..., N h`` (last axis).

    Simpson's rule at even ``n``; a 3/8 panel on ``[0, 3h]`` followed by
    Simpson at odd ``n >= 3``; the trapezoid at ``n = 1``.
    """
    y = np.asarray(y, dtype=float)
    out = np.zeros_like(y)
    N = y.shape[-1] - 1
    if N >= 1:
        out[..., 1] = 0.5 * h * (y[..., 0] + y[..., 1])
    if N >= 2:
        out[..., 2::2] = np.cumsum(h / 3.0 * (y[..., 0:-2:2] + 4.0 * y[..., 1:-1:2] + y[..., 2::2]), axis=-1)
    if N >= 3:
        first = 3.0 * h / 8.0 * (y[..., 0] + 3.0 * y[..., 1] + 3.0 * y[..., 2] + y[..., 3])
        out[..., 3] = first
        if N >= 5:
            panels = h / 3.0 * (y[..., 3:-2:2] + 4.0 * y[..., 4:-1:2] + y[..., 5::2])
            out[..., 5::2] = first[..., None] + np.cumsum(panels, axis=-1)
    return out


def quadrature_weights(N: int, h: float) -> np.ndarray:
    """Lower-triangular ``W`` with ``cumulative_integral(y)[n] == W[n] @ y``."""
    W = np.zeros((N + 1, N + 1))
    for n in range(1, N + 1):
        if n == 1:
            W[1, :2] = 0.5 * h
        elif n % 2 == 0:
            W[n, : n + 1] = h / 3.0 * np.r_[1.0, np.tile([4.0, 2.0], n // 2)[:-1], 1.0][: n + 1]
        else:
            W[n, :4] = 3.0 * h / 8.0 * np.array([1.0, 3.0, 3.0, 1.0])
            if n >= 5:
                m = n - 3
                W[n, 3: n + 1] += h / 3.0 * np.r_[1.0, np.tile([4.0, 2.0], m // 2)[:-1], 1.0][: m + 1]
    return W


def convolution_integral(a, K, h: float) -> np.ndarray:
    """``out[..., n] = int_0^{n h} a(s) K(n h - s) ds`` with the weights of :func:`quadrature_weights`.

    Equivalent to ``sum_s W[n, s] a[s] K[n - s]`` but O(N log N) by FFT.
    """
    a = np.asarray(a, dtype=float)
    K = np.asarray(K, dtype=float)
    a, K = np.broadcast_arrays(a, K)
    N = a.shape[-1] - 1
    out = np.zeros(a.shape)
    if N == 0:
        return out
    sign = np.where(np.arange(N + 1) % 2 == 0, 1.0, -1.0)
    conv = signal.fftconvolve(a, K, axes=-1)[..., : N + 1]
    alt = signal.fftconvolve(a, K * sign, axes=-1)[..., : N + 1]
    # pattern weight (h/3)(3 - (-1)^(n-s)): 4 where n-s is odd, 2 where even
    out[:] = h / 3.0 * (3.0 * conv - alt)
    n = np.arange(N + 1)
    # end weight h/3 instead of 2h/3 at s = n
    out -= h / 3.0 * a * K[..., :1]
    even = n[(n >= 4) & (n % 2 == 0)]
    out[..., even] -= h / 3.0 * a[..., :1] * K[..., even]
    odd = n[(n >= 5) & (n % 2 == 1)]
    corr = h * np.array([3.0 / 8 - 4.0 / 3, 9.0 / 8 - 2.0 / 3, 9.0 / 8 - 4.0 / 3, 3.0 / 8 + 1.0 / 3 - 2.0 / 3])
    for s in range(4):
        if odd.size:
            out[..., odd] += corr[s] * a[..., s: s + 1] * K[..., odd - s]
    # short ranges directly
    out[..., 0] = 0.0
    out[..., 1] = 0.5 * h * (a[..., 0] * K[..., 1] + a[..., 1] * K[..., 0])
    if N >= 2:
        out[..., 2] = h / 3.0 * (a[..., 0] * K[..., 2] + 4.0 * a[..., 1] * K[..., 1] + a[..., 2] * K[..., 0])
    if N >= 3:
        out[..., 3] = 3.0 * h / 8.0 * (a[..., 0] * K[..., 3] + 3.0 * a[..., 1] * K[..., 2]
                                       + 3.0 * a[..., 2] * K[..., 1] + a[..., 3] * K[..., 0])
    return out


# ---------------------------------------------------------------------------
# occupation probabilities


@dataclass
class Occupation:
    """Occupation probabilities ``probs[..., n, k-1] = P(Z(times[n]) = k)``; leading axis over covariate rows."""

    times: np.ndarray
    probs: np.ndarray

    def at(self, t: float) -> np.ndarray:
        n = int(np.argmin(np.abs(self.times - t)))
        if not math.isclose(self.times[n], t, abs_tol=1e-9):
            raise ValueError(f"{t} is not a grid time")
        return self.probs[..., n, :]


def time_grid(t0: float, t: float, step: float = DEFAULT_STEP) -> tuple[np.ndarray, float]:
    if t < t0:
        raise ValueError("need t >= t0")
    if step <= 0:
        raise ValueError("step must be positive")
    N = max(int(math.ceil((t - t0) / step - 1e-9)), 0)
    h = (t - t0) / N if N else 0.0
    return t0 + h * np.arange(N + 1), h


def _as_rows(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        return x.reshape(1, 1), True
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def _is_markov(model: EventModel) -> bool:
    return not any(fam.uses_duration for fam in model.hazards.values())


def _calendar_free(model: EventModel, j: int) -> bool:
    return not any(model.hazards[tr].uses_time for tr in model.exits(j))


def _markov_rk4(model, from_state, times, h, X):
    S = model.state_space.num_states
    nx = X.shape[0]

    def generator(t):
        Q = np.zeros((nx, S, S))
        ctx = Context(t=np.full(nx, t), d=np.zeros(nx), x=X)
        for j, k in model.transitions:
            r = model.rate((j, k), ctx)
            Q[:, j - 1, k - 1] += r
            Q[:, j - 1, j - 1] -= r
        return Q

    P = np.zeros((nx, times.size, S))
    p = np.zeros((nx, S))
    p[:, from_state - 1] = 1.0
    P[:, 0] = p
    Qn = generator(times[0])
    for n in range(times.size - 1):
        Qm = generator(times[n] + 0.5 * h)
        Q1 = generator(times[n + 1])
        k1 = np.einsum("ns,nsk->nk", p, Qn)
        k2 = np.einsum("ns,nsk->nk", p + 0.5 * h * k1, Qm)
        k3 = np.einsum("ns,nsk->nk", p + 0.5 * h * k2, Qm)
        k4 = np.einsum("ns,nsk->nk", p + h * k3, Q1)
        p = p + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        P[:, n + 1] = p
        Qn = Q1
    return P


def _state_2d(model, k, times, h, x, e):
    """Occupancy and outflow densities of a state with calendar-dependent exits (one covariate row)."""
    N = times.size - 1
    m = np.arange(N + 1)
    s = times[:, None]
    t = s + h * m[None, :]
    d = np.broadcast_to(h * m[None, :], t.shape)
    ctx = Context(t=t, d=d, x=x[None, None, :])
    rates = {tr: model.rate(tr, ctx) for tr in model.exits(k)}
    total = sum(rates.values())
    surv = np.exp(-cumulative_integral(total, h))
    rows, cols = np.tril_indices(N + 1)
    W = quadrature_weights(N, h)

    def gather(arr):
        G = np.zeros((N + 1, N + 1))
        G[rows, cols] = arr[cols, rows - cols]
        return (W * G) @ e

    occ = gather(surv)
    out = {tr[1]: gather(surv * r) for tr, r in rates.items()}
    return occ, out


def _nested(model, from_state, times, h, X, d0):
    space = model.state_space
    order = space.topological_order()
    nx, nt = X.shape[0], times.size
    P = np.zeros((nx, nt, space.num_states))
    inflow = {s: np.zeros((nx, nt)) for s in range(1, space.num_states + 1)}
    reach = {from_state}
    for j in order:
        if j in reach:
            reach.update(k for _, k in space.exits(j))
    Xb = X[:, None, :]
    tt = np.broadcast_to(times, (nx, nt))
    # the starting state: a point mass entering at t0 with duration d0
    ctx = Context(t=tt, d=tt - times[0] + d0, x=Xb)
    rates = {tr: model.rate(tr, ctx) for tr in model.exits(from_state)}
    surv = np.exp(-cumulative_integral(sum(rates.values()) if rates else np.zeros((nx, nt)), h))
    P[:, :, from_state - 1] = surv
    for (_, k), r in rates.items():
        inflow[k] += surv * r
    dur = np.broadcast_to(h * np.arange(nt), (nx, nt))
    for k in order[order.index(from_state) + 1:]:
        if k not in reach:
            continue
        e = inflow[k]
        exits = model.exits(k)
        if not exits:
            P[:, :, k - 1] = cumulative_integral(e, h)
        elif _calendar_free(model, k):
            ctx = Context(t=dur, d=dur, x=Xb)
            rates = {tr: model.rate(tr, ctx) for tr in exits}
            kern = np.exp(-cumulative_integral(sum(rates.values()), h))
            P[:, :, k - 1] = convolution_integral(e, kern, h)
            for (_, m), r in rates.items():
                inflow[m] += convolution_integral(e, kern * r, h)
        else:
            for i in range(nx):
                occ, out = _state_2d(model, k, times, h, X[i], e[i])
                P[i, :, k - 1] = occ
                for m, q in out.items():
                    inflow[m][i] += q
    return P


def occupation_probability(model: EventModel, from_state: int, t0: float, t: float, x,
                           step: float = DEFAULT_STEP, d0: float = 0.0, method: str = "auto") -> Occupation:
    """Probabilities of occupying each state on a grid over ``[t0, t]``, starting in ``from_state`` at ``t0``.

    Parameters
    ----------
    model : EventModel
        Hazards are used as given (for a fitted model, the confirmed-event
        hazards ``mu*``).
    x : array_like
        One covariate vector, or a matrix with one row per covariate value.
    d0 : float
        Duration already spent in ``from_state`` at ``t0``.
    method : {"auto", "markov", "nested"}
        ``auto`` uses RK4 when no hazard depends on duration and the nested
        representation otherwise.

    Raises
    ------
    UnsupportedModelError
        For cyclic models with duration dependence.
    """
    X, single = _as_rows(x)
    times, h = time_grid(t0, t, step)
    if method == "auto":
        method = "markov" if _is_markov(model) else "nested"
    if method == "markov":
        if not _is_markov(model):
            raise UnsupportedModelError("the forward equations need duration-free hazards")
        P = _markov_rk4(model, from_state, times, h, X)
    elif method == "nested":
        try:
            model.state_space.topological_order()
        except ValueError:
            raise UnsupportedModelError("cyclic model with duration-dependent hazards") from None
        P = _nested(model, from_state, times, h, X, d0)
    else:
        raise ValueError(f"unknown method {method!r}")
    return Occupation(times, P[0] if single else P)


def expected_occupation(model: EventModel, t: float, x, state: int = 2, from_state: int = 1, t0: float = 0.0,
                        step: float = DEFAULT_STEP) -> np.ndarray:
    """Expected time in ``state`` over ``[t0, t]``: ``V_a(t; x) = int P_{from,state}(t0, u) du``."""
    occ = occupation_probability(model, from_state, t0, t, x, step)
    h = occ.times[1] - occ.times[0] if occ.times.size > 1 else 0.0
    v = cumulative_integral(occ.probs[..., state - 1], h)
    return v[..., -1]


# ---------------------------------------------------------------------------
# estimand grid and error metrics


@dataclass
class EstimandGrid:
    """``values[i, n] = V_a(times[n]; xs[i])``."""

    times: np.ndarray
    xs: np.ndarray
    values: np.ndarray

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "value"])
            for i, x in enumerate(self.xs):
                for n, t in enumerate(self.times):
                    w.writerow([f"{t:.6f}", f"{x:.6f}", f"{self.values[i, n]:.10g}"])
        return path


def estimand_grid(model: EventModel, eta: float = 5.0, x_points: int = 161, x_range=(-4.0, 4.0),
                  step: float = DEFAULT_STEP, state: int = 2, from_state: int = 1) -> EstimandGrid:
    """Tabulate ``V_a(t; x)`` on ``[0, eta]`` times an equispaced covariate grid."""
    xs = np.linspace(x_range[0], x_range[1], x_points)
    occ = occupation_probability(model, from_state, 0.0, eta, xs[:, None], step)
    h = occ.times[1] - occ.times[0]
    values = cumulative_integral(occ.probs[..., state - 1], h)
    return EstimandGrid(occ.times, xs, values)


def estimand_error(estimate: EstimandGrid, truth: EstimandGrid) -> tuple[float, float]:
    """Integrated squared and absolute error over the grid domain (trapezoid rule in both directions)."""
    if (estimate.values.shape != truth.values.shape or not np.allclose(estimate.times, truth.times)
            or not np.allclose(estimate.xs, truth.xs)):
        raise ValueError("estimand grids are not aligned")
    diff = estimate.values - truth.values

    def double(f):
        return float(integrate.trapezoid(integrate.trapezoid(f, truth.times, axis=1), truth.xs))

    return double(diff**2), double(np.abs(diff))
