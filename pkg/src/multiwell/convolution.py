"""Multiwell convolution: pressures from rates and rates from pressures.

With piecewise-constant rates the Stieltjes convolution collapses to a
finite superposition sum over rate increments, so the forward path has no
quadrature error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import DataError, ModelError, PressureControlInfeasible
from .utr import Utr, UtrMatrix
from .welldata import PressureSeries, RateHistory

DEFAULT_BAND = (0.7, 1.3)
MAX_CONDITION = 1e12


@dataclass(frozen=True, eq=False)
class CorrectionTable:
    """Multiplicative factors for the rate steps starting at ``times``."""

    times: np.ndarray
    factors: np.ndarray

    def __post_init__(self):
        t = np.array(self.times, dtype=float).reshape(-1)
        f = np.array(self.factors, dtype=float).reshape(-1)
        if t.shape != f.shape:
            raise ModelError("correction times and factors differ in length")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ModelError("correction times must be strictly increasing")
        if not np.all(np.isfinite(f)):
            raise ModelError("correction factors must be finite")
        t.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "factors", f)

    def __eq__(self, other):
        if not isinstance(other, CorrectionTable):
            return NotImplemented
        return np.array_equal(self.times, other.times) and np.array_equal(self.factors, other.factors)

    __hash__ = None

    def factors_for(self, step_times: np.ndarray) -> np.ndarray:
        """Factor per step; steps without an exact time match get 1."""
        out = np.ones(len(step_times))
        if self.times.size == 0 or len(step_times) == 0:
            return out
        idx = np.searchsorted(self.times, step_times)
        idx_c = np.clip(idx, 0, self.times.size - 1)
        hit = (idx < self.times.size) & (self.times[idx_c] == step_times)
        out[hit] = self.factors[idx_c[hit]]
        return out

    def apply(self, rh: RateHistory) -> RateHistory:
        if self.times.size == 0:
            return rh
        return RateHistory(rh.times, rh.rates * self.factors_for(rh.times))


@dataclass(frozen=True, eq=False)
class DeconvolutionModel:
    """Initial pressures, response matrix and rate-correction factors.

    ``p0`` holds an entry for every well whose pressure is modelled. Wells
    that only act as sources (e.g. injectors without gauges) may be absent.
    """

    p0: Mapping[str, float]
    utrs: UtrMatrix
    rate_corrections: Mapping[str, CorrectionTable] = field(default_factory=dict)
    band: tuple[float, float] = DEFAULT_BAND

    def __post_init__(self):
        wells = set(self.utrs.wells)
        for name, value in self.p0.items():
            if name not in wells:
                raise ModelError(f"p0 given for unknown well {name!r}")
            if not math.isfinite(value):
                raise ModelError(f"p0 for {name!r} must be finite")
        lo, hi = self.band
        if not 0 < lo <= 1 <= hi:
            raise ModelError(f"correction band {self.band} must bracket 1 and stay positive")
        for name, table in self.rate_corrections.items():
            if name not in wells:
                raise ModelError(f"corrections given for unknown well {name!r}")
            if table.factors.size and (
                np.min(table.factors) < lo * (1 - 1e-12) or np.max(table.factors) > hi * (1 + 1e-12)
            ):
                raise ModelError(f"correction factors for {name!r} outside band {self.band}")
        object.__setattr__(self, "p0", {k: float(v) for k, v in self.p0.items()})
        object.__setattr__(self, "rate_corrections", dict(self.rate_corrections))

    def __eq__(self, other):
        if not isinstance(other, DeconvolutionModel):
            return NotImplemented
        return (
            self.p0 == other.p0
            and self.utrs == other.utrs
            and self.rate_corrections == other.rate_corrections
            and tuple(self.band) == tuple(other.band)
        )

    __hash__ = None

    @property
    def wells(self) -> tuple[str, ...]:
        return self.utrs.wells

    @property
    def observers(self) -> list[str]:
        return [n for n in self.wells if n in self.p0]

    def corrected(self, name: str, rh: RateHistory) -> RateHistory:
        table = self.rate_corrections.get(name)
        return rh if table is None else table.apply(rh)

    def without_corrections(self) -> "DeconvolutionModel":
        return DeconvolutionModel(self.p0, self.utrs, {}, self.band)

    def to_dict(self) -> dict:
        return {
            "wells": list(self.wells),
            "p0_bar": dict(self.p0),
            "responses": [
                {"observer": n, "source": m, **self.utrs.responses[(n, m)].to_dict()}
                for n in self.wells for m in self.wells if (n, m) in self.utrs.responses
            ],
            "rate_corrections": {
                n: {"times": t.times.tolist(), "factors": t.factors.tolist()}
                for n, t in self.rate_corrections.items()
            },
            "band": list(self.band),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DeconvolutionModel":
        try:
            wells = tuple(d["wells"])
            responses = {(r["observer"], r["source"]): Utr.from_dict(r) for r in d.get("responses", [])}
            corrections = {
                n: CorrectionTable(c["times"], c["factors"]) for n, c in d.get("rate_corrections", {}).items()
            }
            band = tuple(d.get("band", DEFAULT_BAND))
            return cls(dict(d.get("p0_bar", {})), UtrMatrix(wells, responses), corrections, band)
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed model file: {exc}") from exc


def superpose(u: Utr, times, rh: RateHistory) -> np.ndarray:
    """Drawdown ``sum_k dq_k u(t - t_k)`` at each query time."""
    times = np.asarray(times, dtype=float)
    if len(rh) == 0 or u.is_zero:
        return np.zeros(times.shape)
    lags = times[:, None] - rh.times[None, :]
    return u(lags) @ rh.increments()


def superpose_derivative_form(u: Utr, times, rh: RateHistory) -> np.ndarray:
    """Same drawdown via ``integral u'(t - s) q(s) ds`` plus the jump term.

    Each rate step contributes ``q_k [I(t - t_k) - I(t - t_k+1)]`` with ``I``
    the closed-form integral of the smooth derivative; the Heaviside part of
    the response acts as a Dirac derivative and adds ``jump * q(t-)``.
    """
    times = np.asarray(times, dtype=float)
    if len(rh) == 0 or u.is_zero:
        return np.zeros(times.shape)
    starts = rh.times
    ends = np.append(rh.times[1:], np.inf)
    lag_start = times[:, None] - starts[None, :]
    lag_end = times[:, None] - ends[None, :]
    integral = u.smooth(lag_start) - u.smooth(np.where(np.isinf(lag_end), -1.0, lag_end))
    return integral @ rh.rates + u.jump * rh.value_at(times, side="left")


def _check_inputs(model: DeconvolutionModel, rates: Mapping[str, RateHistory]):
    for name in rates:
        if name not in model.utrs.wells:
            raise ModelError(f"rates given for well {name!r} unknown to the model")


def _query_times(times, observer):
    if isinstance(times, Mapping):
        t = times.get(observer)
        if t is None:
            return None
    else:
        t = times
    t = np.asarray(t, dtype=float).reshape(-1)
    if t.size and np.min(t) < 0:
        raise DataError("query time before 0")
    return t


def _simulate(model, rates, times, kernel):
    _check_inputs(model, rates)
    out = {}
    for n in model.observers:
        t = _query_times(times, n)
        if t is None:
            continue
        drawdown = np.zeros(t.shape)
        for m in model.utrs.sources(n):
            rh = rates.get(m)
            if rh is None or len(rh) == 0:
                continue
            drawdown += kernel(model.utrs.get(n, m), t, model.corrected(m, rh))
        out[n] = PressureSeries(t, model.p0[n] - drawdown)
    return out


def simulate_pressure(model: DeconvolutionModel, rates: Mapping[str, RateHistory], times) -> dict[str, PressureSeries]:
    """Rate-control simulation.

    ``p_n(t) = p0_n - sum_m sum_k dq_mk p_u,nm(t - t_k)`` for every modelled
    well, with ``dq`` the increments of the corrected rates. ``times`` is
    either one array shared by all wells or a mapping per well (wells
    missing from the mapping are skipped). Times must be strictly increasing.
    """
    return _simulate(model, rates, times, superpose)


def simulate_pressure_derivative_form(model: DeconvolutionModel, rates: Mapping[str, RateHistory], times) -> dict[str, PressureSeries]:
    """Rate-control simulation through the derivative form of the convolution."""
    return _simulate(model, rates, times, superpose_derivative_form)


def simulate_rates(
    model: DeconvolutionModel,
    pressure_targets: Mapping[str, PressureSeries],
    fixed_rates: Mapping[str, RateHistory] | None = None,
    history: Mapping[str, RateHistory] | None = None,
    start: float | None = None,
) -> dict[str, RateHistory]:
    """Pressure-control simulation by time marching.

    The controlled wells are the keys of ``pressure_targets``; all must share
    one grid ``g_1 < g_2 < ...``. A new rate step per controlled well starts
    at ``start`` (default: 0, or the end of ``history``) and at every grid
    point but the last, and is chosen so the superposition hits each target
    at the end of its interval. Earlier steps are never revisited.

    ``history`` holds already-known steps of the controlled wells before
    ``start``; they are kept, and the returned histories include them.

    Raises
    ------
    PressureControlInfeasible
        If a per-step system is singular or its condition number exceeds 1e12.
    """
    fixed_rates = dict(fixed_rates or {})
    history = dict(history or {})
    controlled = list(pressure_targets)
    if not controlled:
        return {}
    grid = np.asarray(pressure_targets[controlled[0]].times, dtype=float)
    for name in controlled:
        if name not in model.p0:
            raise ModelError(f"controlled well {name!r} has no modelled pressure")
        if not np.array_equal(pressure_targets[name].times, grid):
            raise DataError("pressure targets must share one time grid")
        if name in fixed_rates:
            raise DataError(f"well {name!r} is both controlled and fixed")
    _check_inputs(model, {**fixed_rates, **history})

    if start is None:
        start = 0.0
        for rh in history.values():
            if len(rh):
                start = max(start, float(rh.times[-1]))
    if grid.size == 0:
        return {n: history.get(n, RateHistory.empty()) for n in controlled}
    if grid[0] <= start:
        raise DataError("pressure targets must lie after the control start time")
    for name, rh in history.items():
        if len(rh) and rh.times[-1] > start:
            raise DataError(f"history of {name!r} extends past the control start")

    step_starts = np.concatenate(([start], grid[:-1]))
    n_c = len(controlled)
    targets = np.array([pressure_targets[n].pressures for n in controlled])

    # contribution of everything known up front (fixed wells, history)
    base = np.array([model.p0[n] for n in controlled])[:, None] * np.ones((1, grid.size))
    for i, n in enumerate(controlled):
        for m in model.utrs.sources(n):
            known = fixed_rates.get(m) if m not in controlled else history.get(m)
            if known is not None and len(known):
                base[i] -= superpose(model.utrs.get(n, m), grid, model.corrected(m, known))

    # unit responses of controlled wells to steps on the grid: resp[i, j, a, b]
    # = u_{n_i m_j}(grid[a] - step_starts[b])
    lags = grid[:, None] - step_starts[None, :]
    resp = np.zeros((n_c, n_c, grid.size, grid.size))
    for i, n in enumerate(controlled):
        for j, m in enumerate(controlled):
            if model.utrs.active(n, m):
                resp[i, j] = model.utrs.get(n, m)(lags)

    last = np.array([history[n].rates[-1] if n in history and len(history[n]) else 0.0 for n in controlled])
    new_rates = np.zeros((n_c, grid.size))
    increments = np.zeros((n_c, grid.size))
    for a in range(grid.size):
        system = resp[:, :, a, a]
        cond = np.linalg.cond(system) if np.any(system) else np.inf
        if not np.isfinite(cond) or cond > MAX_CONDITION:
            raise PressureControlInfeasible(
                f"step system at t={grid[a]:g} is singular or ill-conditioned (cond={cond:.3g})"
            )
        past = np.einsum("ijb,jb->i", resp[:, :, a, :a], increments[:, :a]) if a else np.zeros(n_c)
        rhs = base[:, a] - past - targets[:, a]
        increments[:, a] = np.linalg.solve(system, rhs)
        prev = new_rates[:, a - 1] if a else last
        new_rates[:, a] = prev + increments[:, a]

    out = {}
    for i, n in enumerate(controlled):
        past = history.get(n, RateHistory.empty())
        t_new = step_starts
        q_new = new_rates[i]
        if len(past) and past.times[-1] == start:
            out[n] = RateHistory(np.concatenate((past.times[:-1], t_new)), np.concatenate((past.rates[:-1], q_new)))
        else:
            out[n] = RateHistory(np.concatenate((past.times, t_new)), np.concatenate((past.rates, q_new)))
    return out
