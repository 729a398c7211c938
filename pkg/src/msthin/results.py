"""Containers for fitted parameters and bootstrap output."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import FitDiagnostics


@dataclass
class FitResult:
    """Estimates grouped in named blocks (e.g. ``"g"``, ``"f"``, ``"theta"``).

    ``blocks`` maps block name to a flat estimate vector; ``names`` gives the
    coordinate labels. ``diagnostics`` is keyed by the optimization unit
    (one per separately maximized parameter group).
    """

    blocks: dict[str, np.ndarray] = field(default_factory=dict)
    names: dict[str, list[str]] = field(default_factory=dict)
    objective: dict[str, float] = field(default_factory=dict)
    diagnostics: dict[str, FitDiagnostics] = field(default_factory=dict)
    warm_start: str = "default"
    models: dict = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return all(d.converged for d in self.diagnostics.values())

    @property
    def iterations(self) -> int:
        return sum(d.iterations for d in self.diagnostics.values())

    def flagged(self) -> list[str]:
        return [k for k, d in self.diagnostics.items() if d.flags]

    def merge(self, other: FitResult) -> FitResult:
        out = FitResult(dict(self.blocks), dict(self.names), dict(self.objective),
                        dict(self.diagnostics), self.warm_start, dict(self.models))
        out.blocks.update(other.blocks)
        out.names.update(other.names)
        out.objective.update(other.objective)
        out.diagnostics.update(other.diagnostics)
        out.models.update(other.models)
        return out

    def to_dict(self) -> dict:
        return {
            "blocks": {k: [float(v) for v in vec] for k, vec in self.blocks.items()},
            "names": self.names,
            "objective": {k: float(v) for k, v in self.objective.items()},
            "converged": self.converged,
            "iterations": self.iterations,
            "warm_start": self.warm_start,
            "diagnostics": {
                k: {"iterations": d.iterations, "evaluations": d.evaluations, "converged": d.converged,
                    "restarts": d.restarts_used, "message": d.message, "flags": list(d.flags)}
                for k, d in self.diagnostics.items()
            },
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


@dataclass
class BootstrapResult:
    B: int
    seed: int
    names: list[str]
    estimates: np.ndarray
    levels: tuple[float, ...] = (0.90, 0.95, 0.99)
    intervals: dict[float, np.ndarray] = field(default_factory=dict)
    failures: int = 0

    @property
    def failure_rate(self) -> float:
        return self.failures / self.B if self.B else 0.0

    def to_dict(self) -> dict:
        return {
            "B": self.B,
            "seed": self.seed,
            "names": self.names,
            "failures": self.failures,
            "failure_rate": self.failure_rate,
            "intervals": {f"{lv:g}": [[float(a), float(b)] for a, b in iv] for lv, iv in self.intervals.items()},
        }

    def write(self, directory) -> None:
        directory = Path(directory)
        (directory / "bootstrap.json").write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        with open(directory / "bootstrap_resamples.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["resample", *self.names])
            for i, row in enumerate(self.estimates):
                w.writerow([i, *(f"{v:.10g}" for v in row)])


def percentile_intervals(estimates: np.ndarray, levels) -> dict[float, np.ndarray]:
    """Percentile intervals whose endpoints are order statistics of the resample estimates."""
    est = np.asarray(estimates, dtype=float)
    out = {}
    for lv in levels:
        a = (1.0 - lv) / 2.0
        lo = np.quantile(est, a, axis=0, method="inverted_cdf")
        hi = np.quantile(est, 1.0 - a, axis=0, method="inverted_cdf")
        out[float(lv)] = np.stack([lo, hi], axis=-1)
    return out
