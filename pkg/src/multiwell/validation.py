"""Metrics, split validation, split rehearsal and penalty tuning."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Sequence

import numpy as np

from .crm import PRESSURE_FIT, RATE_FIT, WEIGHTED_COMBO, CrmFitMode, crm_fit, crm_simulate_pressure, crm_simulate_rates
from .convolution import simulate_pressure
from .errors import DataError, ModelError
from .mdcv import MdcvOptions, deconvolve
from .reports import rmsd_r2
from .synthetic import SyntheticSpec, generate_scenario
from .welldata import Scenario, SplitSpec, split_dataset, variation_events

VALIDATED = "validated"
FAILED = "failed"
NO_VALIDATION = "no_validation_conditions"
DEFAULT_THRESHOLD = 0.9
MDCV = "mdcv"
CRM = "crm"


def metrics(predicted, actual) -> tuple[float, float | None]:
    """``(rmsd, r2)``; ``r2`` is ``None`` when ``actual`` has no variance."""
    predicted = np.asarray(predicted, dtype=float).reshape(-1)
    actual = np.asarray(actual, dtype=float).reshape(-1)
    if predicted.size != actual.size:
        raise DataError("predicted and actual series differ in length")
    if actual.size < 2:
        raise DataError("metrics need at least two points")
    return rmsd_r2(predicted, actual)


@dataclass(frozen=True)
class ValidationReport:
    """Out-of-sample fit quality and verdict.

    ``quantity`` is ``"pressure"`` (bar) or ``"rate"`` (m3/day). The
    training/validation point counts are reported, not judged.
    """

    verdict: str
    threshold: float
    quantity: str = "pressure"
    rmsd: float | None = None
    r2: float | None = None
    n_points: int = 0
    n_training_points: int = 0
    per_well: Mapping[str, Mapping[str, Any]] = field(default_factory=dict)
    engine_status: str | None = None
    reason: str = ""
    series: Mapping[str, tuple[np.ndarray, np.ndarray, np.ndarray]] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.verdict not in (VALIDATED, FAILED, NO_VALIDATION):
            raise ValueError(f"unknown verdict {self.verdict!r}")

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "threshold_r2": self.threshold,
            "quantity": self.quantity,
            "rmsd": self.rmsd,
            "r2": self.r2,
            "n_points": self.n_points,
            "n_training_points": self.n_training_points,
            "per_well": {k: dict(v) for k, v in self.per_well.items()},
            "engine_status": self.engine_status,
            "reason": self.reason,
        }


def _windows(spec: SplitSpec, end: float) -> tuple[list[tuple[float, float]], list[tuple[float, float]]]:
    """Training and validation time windows covering ``[0, end]``."""
    stop = math.nextafter(end, math.inf)
    if spec.mode == "train-then-validate":
        return [(0.0, spec.boundary)], [(spec.boundary, stop)]
    train = sorted(spec.intervals)
    valid, cursor = [], 0.0
    for a, b in train:
        if a > cursor:
            valid.append((cursor, a))
        cursor = max(cursor, b)
    if cursor < stop:
        valid.append((cursor, stop))
    return train, valid


def has_events(s: Scenario, windows: Sequence[tuple[float, float]], threshold: float | None = None) -> bool:
    """Whether any well changes its rate inside one of ``windows``."""
    kwargs = {} if threshold is None else {"threshold": threshold}
    for rh in s.rates.values():
        for w in windows:
            if variation_events(rh, window=w, **kwargs)[0] > 0:
                return True
    return False


def _series(times, pred, obs) -> dict:
    """``well -> (times, predicted, observed)`` for plot-ready tables."""
    return {n: (np.asarray(times[n]), pred[n], obs[n]) for n in obs if obs[n].size}


def _pooled(pred: Mapping[str, np.ndarray], obs: Mapping[str, np.ndarray]):
    per_well = {}
    for n in obs:
        if obs[n].size == 0:
            continue
        rmsd, r2 = rmsd_r2(pred[n], obs[n])
        per_well[n] = {"rmsd": rmsd, "r2": r2, "n_points": int(obs[n].size)}
    names = list(per_well)
    if not names:
        return None, None, 0, per_well
    p = np.concatenate([pred[n] for n in names])
    a = np.concatenate([obs[n] for n in names])
    rmsd, r2 = rmsd_r2(p, a) if a.size >= 2 else (rmsd_r2(p, a)[0], None)
    return rmsd, r2, int(a.size), per_well


def _verdict(r2: float | None, threshold: float) -> str:
    return VALIDATED if r2 is not None and r2 >= threshold else FAILED


def cross_validate(s: Scenario, spec: SplitSpec, engine: str = MDCV, opts=None,
                   threshold_r2: float = DEFAULT_THRESHOLD):
    """Train on one partition and score predictions on the other.

    ``opts`` is :class:`MdcvOptions` for ``engine="mdcv"`` and a
    :class:`CrmFitMode` (or mode name) for ``engine="crm"``. Pressure-type
    CRM modes are scored on producer pressures, rate-type modes on producer
    rate records inside the validation window.

    Returns ``(model, report)``; ``model`` is ``None`` when no validation
    is possible.
    """
    if engine not in (MDCV, CRM):
        raise ModelError(f"unknown engine {engine!r}")
    training, validation = split_dataset(s, spec)
    train_w, valid_w = _windows(spec, s.end_time)
    n_train = sum(len(ps) for ps in training.pressures.values())
    if not has_events(s, train_w) or not has_events(s, valid_w):
        which = "training" if not has_events(s, train_w) else "validation"
        return None, ValidationReport(NO_VALIDATION, threshold_r2, n_training_points=n_train,
                                      reason=f"no rate variation inside the {which} window")
    if engine == MDCV:
        model, fit = deconvolve(training, opts or MdcvOptions())
        if model is None:
            return None, ValidationReport(NO_VALIDATION, threshold_r2, engine_status=fit.status,
                                          n_training_points=n_train, reason="training data carry no variation")
        times = {n: ps.times for n, ps in validation.pressures.items() if len(ps) and n in model.p0}
        sim = simulate_pressure(model, s.rates, times)
        pred = {n: sim[n].pressures for n in times}
        obs = {n: validation.pressures[n].pressures for n in times}
        rmsd, r2, n_pts, per_well = _pooled(pred, obs)
        return model, ValidationReport(_verdict(r2, threshold_r2), threshold_r2, "pressure", rmsd, r2, n_pts,
                                       n_train, per_well, fit.status, series=_series(times, pred, obs))

    mode = opts if isinstance(opts, CrmFitMode) else CrmFitMode(opts or PRESSURE_FIT)
    rate_mode = mode.kind in (RATE_FIT, WEIGHTED_COMBO)
    if rate_mode and spec.mode != "train-then-validate":
        raise DataError("rate-type CRM validation needs a train-then-validate split")
    model, fit = crm_fit(training, mode)
    if model is None:
        return None, ValidationReport(NO_VALIDATION, threshold_r2, engine_status=fit.status,
                                      n_training_points=n_train, reason="training data carry no variation")
    if rate_mode:
        q0 = {n: float(s.rates[n].value_at(s.pressures[n].times[0], side="right")) for n in model.producers}
        sim = crm_simulate_rates(model, s.rates, s.pressures, q0)
        pred, obs, times = {}, {}, {}
        for n in model.producers:
            rec = s.rates[n]
            mask = (rec.times >= spec.boundary) & (rec.times <= sim[n].times[-1])
            times[n] = rec.times[mask]
            pred[n] = sim[n].value_at(times[n], side="right")
            obs[n] = rec.rates[mask]
        quantity = "rate"
    else:
        p0 = fit.diagnostics["p0"]
        times = {n: validation.pressures[n].times for n in model.producers}
        sim = crm_simulate_pressure(model, {n: s.rates[n] for n in s.producers},
                                    {n: s.rates[n] for n in s.injectors}, p0, times)
        pred = {n: sim[n].pressures for n in model.producers}
        obs = {n: validation.pressures[n].pressures for n in model.producers}
        quantity = "pressure"
    rmsd, r2, n_pts, per_well = _pooled(pred, obs)
    return model, ValidationReport(_verdict(r2, threshold_r2), threshold_r2, quantity, rmsd, r2, n_pts,
                                   n_train, per_well, fit.status, series=_series(times, pred, obs))


@dataclass(frozen=True)
class RehearsalResult:
    verdict: str
    best: SplitSpec | None
    attempts: tuple[Mapping[str, Any], ...] = ()

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "best_split": None if self.best is None else self.best.to_dict(),
            "attempts": [dict(a) for a in self.attempts],
        }


def rehearse_split(spec: SyntheticSpec, candidate_splits: Sequence[SplitSpec], engine: str = MDCV,
                   threshold: float = DEFAULT_THRESHOLD, max_iter: int | None = None, opts=None) -> RehearsalResult:
    """Try candidate splits on a synthetic copy of the field until one validates.

    The synthetic scenario carries the field's rate schedule (``spec.rates``)
    so the event structure matches the real data. Candidates are tried in
    order; the first validated one is returned, otherwise the verdict is
    ``no_validation_conditions``.
    """
    if not candidate_splits:
        raise DataError("no candidate splits")
    s, _, _ = generate_scenario(spec)
    limit = len(candidate_splits) if max_iter is None else min(max_iter, len(candidate_splits))
    attempts = []
    for split in candidate_splits[:limit]:
        try:
            _, report = cross_validate(s, split, engine, opts, threshold)
            verdict, r2 = report.verdict, report.r2
        except DataError as exc:
            verdict, r2 = NO_VALIDATION, None
            report = None
            reason = str(exc)
        else:
            reason = report.reason
        attempts.append({"split": split.to_dict(), "verdict": verdict, "r2": r2, "reason": reason})
        if verdict == VALIDATED:
            return RehearsalResult(VALIDATED, split, tuple(attempts))
    return RehearsalResult(NO_VALIDATION, None, tuple(attempts))


def forward_folds(s: Scenario, n_folds: int) -> list[tuple[float, float, float]]:
    """Contiguous forward-chaining folds ``(train_end, valid_start, valid_end)``.

    The pressure span is cut into ``n_folds + 1`` equal blocks; fold ``i``
    trains on blocks ``0..i`` and validates on block ``i + 1``.
    """
    if n_folds < 2:
        raise DataError("need at least two folds")
    lo = min(float(ps.times[0]) for ps in s.pressures.values() if len(ps))
    hi = max(float(ps.times[-1]) for ps in s.pressures.values() if len(ps))
    edges = np.linspace(lo, hi, n_folds + 2)
    edges[-1] = math.nextafter(hi, math.inf)
    folds = []
    for i in range(n_folds):
        a, b, c = edges[i + 1], edges[i + 1], edges[i + 2]
        n_tr = sum(int(np.sum(ps.times < a)) for ps in s.pressures.values())
        n_va = sum(int(np.sum((ps.times >= b) & (ps.times < c))) for ps in s.pressures.values())
        if n_tr == 0 or n_va == 0:
            raise DataError(f"fold {i} is degenerate")
        folds.append((float(a), float(b), float(c)))
    return folds


DEFAULT_CURVATURE_GRID = (1e-3, 1e-2, 1e-1, 1.0)
DEFAULT_CUMULATIVE_GRID = (1e-2, 1e-1, 1.0)


def bootstrap_tune(training: Scenario, opts: MdcvOptions, n_folds: int = 2, *,
                   curvature_grid: Sequence[float] | None = None,
                   cumulative_grid: Sequence[float] | None = None,
                   tie_tolerance: float = 1e-9) -> MdcvOptions:
    """Pick the penalty weights with the best mean inner-fold r2.

    Folds are contiguous in time. Scores within ``tie_tolerance`` of the best
    count as ties and go to the smaller weights. Without group cumulatives in
    the data only ``opts.lambda_cumulative`` is tried.
    """
    folds = forward_folds(training, n_folds)
    c_grid = sorted(set(curvature_grid if curvature_grid is not None else DEFAULT_CURVATURE_GRID))
    if cumulative_grid is not None:
        q_grid = sorted(set(cumulative_grid))
    elif training.cumulative_reference:
        q_grid = list(DEFAULT_CUMULATIVE_GRID)
    else:
        q_grid = [opts.lambda_cumulative]
    if len(c_grid) == 1 and len(q_grid) == 1:
        if c_grid[0] == opts.lambda_curvature and q_grid[0] == opts.lambda_cumulative:
            return opts
        return replace(opts, lambda_curvature=c_grid[0], lambda_cumulative=q_grid[0])

    scored = []
    for lc in c_grid:
        for lq in q_grid:
            trial = replace(opts, lambda_curvature=lc, lambda_cumulative=lq)
            scores = []
            for a, b, c in folds:
                fit_s = training.with_pressures({n: ps.select(ps.times < a) for n, ps in training.pressures.items()})
                val = {n: ps.select((ps.times >= b) & (ps.times < c)) for n, ps in training.pressures.items()}
                model, _ = deconvolve(fit_s, trial)
                if model is None:
                    scores.append(-math.inf)
                    continue
                times = {n: v.times for n, v in val.items() if len(v) and n in model.p0}
                sim = simulate_pressure(model, training.rates, times)
                _, r2, _, _ = _pooled({n: sim[n].pressures for n in times},
                                      {n: val[n].pressures for n in times})
                scores.append(-math.inf if r2 is None else r2)
            scored.append((float(np.mean(scores)), lc, lq))
    best = max(score for score, _, _ in scored)
    chosen = min((lc, lq) for score, lc, lq in scored if score >= best - tie_tolerance)
    return replace(opts, lambda_curvature=chosen[0], lambda_cumulative=chosen[1])
