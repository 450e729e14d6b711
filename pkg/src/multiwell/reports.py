"""Fit reports and JSON emission shared by the engines and the CLI."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

CONVERGED = "converged"
BUDGET_EXHAUSTED = "budget_exhausted"
ILL_POSED = "ill_posed"
NO_VARIATION = "no_variation"
STATUSES = (CONVERGED, BUDGET_EXHAUSTED, ILL_POSED, NO_VARIATION)


def _jsonable(value):
    if isinstance(value, Mapping):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return v if math.isfinite(v) else None
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def dumps(obj: Any) -> str:
    """Canonical JSON: sorted keys, fixed indentation, non-finite as null."""
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n"


def write_json(obj: Any, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj), encoding="utf-8")
    return path


@dataclass(frozen=True)
class FitReport:
    """Outcome of a training run.

    ``objective_trace`` holds the objective after every accepted step, so it
    never increases. ``residuals`` maps each well to model minus data at its
    training samples. ``wall_time`` is informational only: it takes no part
    in equality and is not serialized, which keeps reports reproducible.
    """

    status: str
    objective_trace: tuple[float, ...] = ()
    final_rmsd: float | None = None
    final_r2: float | None = None
    residuals: Mapping[str, tuple[float, ...]] = field(default_factory=dict)
    n_iterations: int = 0
    diagnostics: Mapping[str, Any] = field(default_factory=dict)
    wall_time: float = field(default=0.0, compare=False)

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ValueError(f"unknown fit status {self.status!r}")
        object.__setattr__(self, "objective_trace", tuple(float(v) for v in self.objective_trace))
        object.__setattr__(
            self, "residuals", {k: tuple(float(x) for x in v) for k, v in self.residuals.items()}
        )
        if self.final_r2 is not None and self.final_r2 > 1 + 1e-12:
            raise ValueError("r2 cannot exceed 1")

    @property
    def ok(self) -> bool:
        return self.status in (CONVERGED, BUDGET_EXHAUSTED, ILL_POSED)

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "objective_trace": list(self.objective_trace),
            "final_rmsd": self.final_rmsd,
            "final_r2": self.final_r2,
            "residuals": {k: list(v) for k, v in self.residuals.items()},
            "n_iterations": self.n_iterations,
            "diagnostics": _jsonable(self.diagnostics),
        }


def rmsd_r2(predicted, actual) -> tuple[float, float | None]:
    """Root-mean-square deviation and coefficient of determination.

    ``r2`` is ``None`` when ``actual`` has zero variance.
    """
    predicted = np.asarray(predicted, dtype=float).reshape(-1)
    actual = np.asarray(actual, dtype=float).reshape(-1)
    if predicted.shape != actual.shape:
        raise ValueError("predicted and actual differ in length")
    if actual.size == 0:
        raise ValueError("metrics need at least one point")
    resid = predicted - actual
    ss_res = float(resid @ resid)
    rmsd = math.sqrt(ss_res / actual.size)
    centred = actual - actual.mean()
    ss_tot = float(centred @ centred)
    if ss_tot <= 0.0:
        return rmsd, None
    return rmsd, 1.0 - ss_res / ss_tot
