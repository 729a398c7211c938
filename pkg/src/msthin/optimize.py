"""Derivative-free simplex search (Nelder-Mead) for maximization."""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .core import FitDiagnostics, OptimizerConfig

ALPHA, GAMMA, RHO, SIGMA = 1.0, 2.0, 0.5, 0.5


def _safe(f: Callable[[np.ndarray], float]):
    def g(x):
        v = float(f(x))
        return v if math.isfinite(v) else -math.inf
    return g


def _simplex(x0, step):
    n = len(x0)
    pts = np.tile(x0, (n + 1, 1))
    for i in range(n):
        pts[i + 1, i] += step if x0[i] == 0 else step * max(1.0, abs(x0[i]))
    return pts


def _order(pts, vals):
    idx = np.lexsort((np.arange(len(vals)), -vals))
    return pts[idx], vals[idx]


def _search(f, pts, vals, cfg: OptimizerConfig, budget: int, diag: FitDiagnostics):
    n = pts.shape[1]
    it = 0
    while it < budget:
        pts, vals = _order(pts, vals)
        diameter = np.max(np.abs(pts[1:] - pts[0])) if n else 0.0
        spread = vals[0] - vals[-1]
        if diameter <= cfg.tolerance and spread <= cfg.tolerance * max(1.0, abs(vals[0])):
            return pts, vals, it, True
        it += 1
        centroid = pts[:-1].mean(axis=0)
        xr = centroid + ALPHA * (centroid - pts[-1])
        fr = f(xr)
        if fr > vals[0]:
            xe = centroid + GAMMA * (xr - centroid)
            fe = f(xe)
            if fe > fr:
                pts[-1], vals[-1] = xe, fe
            else:
                pts[-1], vals[-1] = xr, fr
            continue
        if fr > vals[-2]:
            pts[-1], vals[-1] = xr, fr
            continue
        if fr > vals[-1]:
            xc = centroid + RHO * (xr - centroid)
            fc = f(xc)
            if fc >= fr:
                pts[-1], vals[-1] = xc, fc
                continue
        else:
            xc = centroid + RHO * (pts[-1] - centroid)
            fc = f(xc)
            if fc > vals[-1]:
                pts[-1], vals[-1] = xc, fc
                continue
        for i in range(1, n + 1):
            pts[i] = pts[0] + SIGMA * (pts[i] - pts[0])
            vals[i] = f(pts[i])
    pts, vals = _order(pts, vals)
    return pts, vals, it, False


def nelder_mead_maximize(objective: Callable[[np.ndarray], float], start, opt: OptimizerConfig | None = None):
    """Maximize ``objective`` from ``start``.

    Returns ``(argmax, value, diagnostics)``. After convergence the simplex
    is re-expanded around the incumbent up to ``opt.restarts`` times; a
    restart that finds no better point ends the search. A point whose
    re-expanded simplex is exactly level in every direction is reported as a
    plateau (unconverged).
    """
    opt = opt or OptimizerConfig()
    diag = FitDiagnostics()
    count = [0]
    raw = _safe(objective)

    def f(x):
        count[0] += 1
        return raw(x)

    x0 = np.asarray(start, dtype=float).copy()
    if x0.ndim != 1:
        raise ValueError("start must be a vector")
    f0 = f(x0)
    if not math.isfinite(f0):
        raise ValueError("objective is not finite at the starting point")
    if x0.size == 0:
        diag.converged, diag.evaluations = True, count[0]
        return x0, f0, diag

    pts = _simplex(x0, opt.initial_step)
    vals = np.array([f0] + [f(p) for p in pts[1:]])
    remaining = opt.max_iterations
    best_x, best_f = x0, f0
    converged = False
    restarts = 0
    while True:
        pts, vals, used, ok = _search(f, pts, vals, opt, remaining, diag)
        remaining -= used
        diag.iterations += used
        improved = vals[0] > best_f + opt.tolerance * max(1.0, abs(best_f))
        if vals[0] >= best_f:
            best_x, best_f = pts[0].copy(), float(vals[0])
        if not ok:
            converged = False
            diag.message = "maximum iterations reached"
            break
        converged = True
        if restarts >= opt.restarts or (restarts > 0 and not improved):
            break
        restarts += 1
        pts = _simplex(best_x, opt.initial_step)
        vals = np.array([best_f] + [f(p) for p in pts[1:]])
        if np.all(vals[1:] == best_f):
            converged = False
            diag.flags.append("plateau")
            diag.message = "objective is flat around the incumbent"
            break
    diag.converged = converged
    diag.restarts_used = restarts
    diag.evaluations = count[0]
    if converged and not diag.message:
        diag.message = "converged"
    return best_x, best_f, diag
