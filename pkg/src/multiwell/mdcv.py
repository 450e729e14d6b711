"""Multiwell deconvolution: fit p0, unit-rate responses and rate corrections.

The objective is a weighted sum of squares over four blocks::

    sum w_p (p_model - p_data)^2            pressure match
  + sum w_q (q_model - q_data)^2            rate corrections
  + lambda_c sum (second differences of z)^2  response curvature
  + lambda_q sum ((V_model - V_ref) / V_ref)^2  group cumulatives

A differential-evolution stage searches a coarse space (p0, jumps, one
log-derivative level per response) and a Levenberg-Marquardt stage refines
every node value and correction factor.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg

from .convolution import DEFAULT_BAND, CorrectionTable, DeconvolutionModel, simulate_pressure, simulate_rates
from .errors import DataError, FitError, ModelError
from .reports import BUDGET_EXHAUSTED, CONVERGED, ILL_POSED, NO_VARIATION, FitReport, rmsd_r2
from .utr import Z_CEIL, Z_FLOOR, Utr, UtrMatrix, log_node_grid
from .welldata import INJECTOR, PRODUCER, PressureSeries, RateHistory, Scenario, qc_report

ACTIVITY_ALL = "all"
ACTIVITY_CRM = "crm"
NULL_RATIO = 1e-12


@dataclass(frozen=True)
class MdcvOptions:
    """Settings for :func:`deconvolve`.

    Attributes
    ----------
    pressure_weight, rate_weight : multipliers of the per-sample trust weights
        (pressure samples) and of the rate-correction penalty.
    lambda_curvature : weight of squared second differences of node values.
    lambda_cumulative : weight of squared relative group-cumulative misfit.
    rate_correction_band : bounds of the multiplicative rate factors.
    fit_rate_corrections : whether per-step rate factors are free parameters.
    activity : ``"all"`` (every observed well against every flowing well),
        ``"crm"`` (own response plus injector-to-producer responses) or an
        explicit sequence of ``(observer, source)`` pairs.
    nodes_per_decade, node_range : node grid; ``node_range=None`` spans the
        smallest pressure sample spacing to the history length.
    de_population, de_generations, de_f, de_cr : differential evolution.
    gn_iterations : Levenberg-Marquardt iteration budget.
    tolerance : relative objective change that stops the refinement.
    seed : seed of the single random generator used by the fit.
    """

    pressure_weight: float = 1.0
    rate_weight: float = 1e-4
    lambda_curvature: float = 0.1
    lambda_cumulative: float = 0.0
    rate_correction_band: tuple[float, float] = DEFAULT_BAND
    fit_rate_corrections: bool = False
    activity: str | tuple[tuple[str, str], ...] = ACTIVITY_ALL
    nodes_per_decade: int = 6
    node_range: tuple[float, float] | None = None
    de_population: int = 32
    de_generations: int = 60
    de_f: float = 0.7
    de_cr: float = 0.9
    gn_iterations: int = 1000
    tolerance: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.activity, str):
            object.__setattr__(self, "activity", tuple(tuple(p) for p in self.activity))
        elif self.activity not in (ACTIVITY_ALL, ACTIVITY_CRM):
            raise ModelError(f"unknown activity spec {self.activity!r}")
        object.__setattr__(self, "rate_correction_band", tuple(float(b) for b in self.rate_correction_band))
        for name in ("pressure_weight", "rate_weight", "lambda_curvature", "lambda_cumulative"):
            if not getattr(self, name) >= 0:
                raise ModelError(f"{name} must be >= 0")
        lo, hi = self.rate_correction_band
        if not 0 < lo <= 1 <= hi:
            raise ModelError("rate correction band must contain 1 and stay positive")
        if not self.tolerance > 0:
            raise ModelError("tolerance must be > 0")
        if self.nodes_per_decade < 1:
            raise ModelError("nodes_per_decade must be >= 1")
        if self.de_population < 4 and self.de_generations > 0:
            raise ModelError("differential evolution needs a population of at least 4")
        if not (0 < self.de_f <= 2 and 0 <= self.de_cr <= 1):
            raise ModelError("DE settings out of range")
        if self.de_generations < 0 or self.gn_iterations < 0:
            raise ModelError("iteration budgets must be >= 0")
        if self.node_range is not None and not 0 < self.node_range[0] <= self.node_range[1]:
            raise ModelError("node_range must be positive and ordered")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["rate_correction_band"] = list(self.rate_correction_band)
        d["activity"] = self.activity if isinstance(self.activity, str) else [list(p) for p in self.activity]
        d["node_range"] = None if self.node_range is None else list(self.node_range)
        return d


# ---------------------------------------------------------------------------
# objective on an explicit model


def _curvature(z: np.ndarray) -> np.ndarray:
    return np.diff(z, 2) if z.size >= 3 else np.empty(0)


def _cumulative_terms(rates: Mapping[str, RateHistory], s: Scenario) -> np.ndarray:
    out = []
    for rec in s.cumulative_reference:
        vol = 0.0
        for name in rec.wells:
            rh = rates[name]
            if len(rh):
                vol += abs(float(rh.cumulative(rec.end) - rh.cumulative(rec.start)))
        out.append((vol - rec.volume) / rec.volume)
    return np.array(out)


def objective_value(model: DeconvolutionModel, data: Scenario, opt: MdcvOptions) -> float:
    """Weighted objective of ``model`` on ``data``.

    Every pressure sample of a well without an initial pressure in the
    model is a dimension mismatch, as is any scenario well unknown to it.
    """
    for name in data.names:
        if name not in model.wells:
            raise ModelError(f"well {name!r} missing from the model")
    rates = {n: data.rates[n] for n in data.names}
    total = 0.0
    times = {}
    for n, ps in data.pressures.items():
        if len(ps) == 0:
            continue
        if n not in model.p0:
            raise ModelError(f"model has no initial pressure for observed well {n!r}")
        times[n] = ps.times
    sim = simulate_pressure(model, rates, times)
    for n, series in sim.items():
        ps = data.pressures[n]
        r = series.pressures - ps.pressures
        total += float(np.sum(opt.pressure_weight * ps.weights * r * r))
    corrected = {n: model.corrected(n, rh) for n, rh in rates.items()}
    for n, rh in rates.items():
        d = corrected[n].rates - rh.rates
        total += opt.rate_weight * float(d @ d)
    for u in model.utrs.responses.values():
        c = _curvature(u.z)
        total += opt.lambda_curvature * float(c @ c)
    cum = _cumulative_terms(corrected, data)
    total += opt.lambda_cumulative * float(cum @ cum)
    return total


# ---------------------------------------------------------------------------
# problem assembly


def _active_pairs(s: Scenario, observers: Sequence[str], opt: MdcvOptions) -> list[tuple[str, str]]:
    flowing = [m for m in s.names if s.rates[m].max_abs() > 0]
    if isinstance(opt.activity, tuple):
        pairs = []
        for n, m in opt.activity:
            if n not in s.names or m not in s.names:
                raise ModelError(f"activity pair ({n}, {m}) names an unknown well")
            if n in observers and m in flowing:
                pairs.append((n, m))
        return pairs
    pairs = []
    for n in observers:
        for m in flowing:
            if opt.activity == ACTIVITY_CRM and n != m:
                if not (s.role(n) == PRODUCER and s.role(m) == INJECTOR):
                    continue
            pairs.append((n, m))
    return pairs


def default_node_grid(s: Scenario, opt: MdcvOptions) -> np.ndarray:
    if opt.node_range is not None:
        return log_node_grid(opt.node_range[0], opt.node_range[1], opt.nodes_per_decade)
    spacing = []
    for ps in s.pressures.values():
        if len(ps) >= 2:
            d = np.diff(ps.times)
            spacing.append(float(np.min(d)))
        elif len(ps) == 1 and ps.times[0] > 0:
            spacing.append(float(ps.times[0]))
    t_min = min(spacing) if spacing else 1.0
    t_max = max(s.end_time, t_min)
    return log_node_grid(t_min, t_max, opt.nodes_per_decade)


@dataclass
class _Pair:
    observer: int
    source: int
    diag: bool
    flat: np.ndarray         # flattened (row * n_lag_ext + lag index)
    idx: np.ndarray          # (n_obs_samples, n_steps) lag index, sentinel for lag <= 0
    idx_next: np.ndarray     # same for the following step start
    ones: np.ndarray         # lag > 0 mask
    lagpos: np.ndarray       # positive part of lags
    z_slice: slice = slice(0)
    jump_index: int | None = None


class MdcvProblem:
    """Parameter layout, residuals and Jacobian of one deconvolution fit.

    Parameter vector: free initial pressures, diagonal jumps, node values of
    every active pair, then correction factors for each flowing step that
    starts before the last training pressure sample.
    """

    def __init__(self, s: Scenario, opt: MdcvOptions):
        self.scenario = s
        self.opt = opt
        self.observers = [n for n in s.names if len(s.pressures[n])]
        if not self.observers:
            raise DataError("no pressure data to deconvolve")
        self.nodes = default_node_grid(s, opt)
        pairs = _active_pairs(s, self.observers, opt)
        if not pairs:
            raise ModelError("no active well pairs")
        self.sources = sorted({m for _, m in pairs}, key=s.names.index)
        self.pair_names = pairs

        self.obs_t = [s.pressures[n].times for n in self.observers]
        self.obs_p = [s.pressures[n].pressures for n in self.observers]
        self.obs_sw = [np.sqrt(opt.pressure_weight * s.pressures[n].weights) for n in self.observers]
        self.obs_offset = np.concatenate([[0], np.cumsum([t.size for t in self.obs_t])])
        self.n_p_rows = int(self.obs_offset[-1])
        self.q_data = [s.rates[m] for m in self.sources]

        # global unique positive lags
        lag_sets = []
        for n, m in pairs:
            lag = self.obs_t[self.observers.index(n)][:, None] - s.rates[m].times[None, :]
            lag_sets.append(lag[lag > 0])
        self.lags = np.unique(np.concatenate(lag_sets)) if lag_sets else np.empty(0)
        self.n_lag_ext = self.lags.size + 1
        sentinel = self.lags.size

        labels: list[str] = []
        self.p0_index: dict[str, int] = {}
        for n in self.observers:
            if n not in s.p0:
                self.p0_index[n] = len(labels)
                labels.append(f"p0[{n}]")
        self.pairs: list[_Pair] = []
        for n, m in pairs:
            io, im = self.observers.index(n), self.sources.index(m)
            t_obs = self.obs_t[io]
            steps = s.rates[m].times
            lag = t_obs[:, None] - steps[None, :]
            pos = lag > 0
            idx = np.full(lag.shape, sentinel, dtype=np.int64)
            idx[pos] = np.searchsorted(self.lags, lag[pos])
            idx_next = np.full(lag.shape, sentinel, dtype=np.int64)
            idx_next[:, :-1] = idx[:, 1:]
            flat = (np.arange(t_obs.size)[:, None] * self.n_lag_ext + idx).ravel()
            pair = _Pair(io, im, n == m, flat, idx, idx_next, pos.astype(float), np.where(pos, lag, 0.0))
            if pair.diag:
                pair.jump_index = len(labels)
                labels.append(f"jump[{n}]")
            self.pairs.append(pair)
        for pair, (n, m) in zip(self.pairs, pairs):
            start = len(labels)
            labels += [f"z[{n}<-{m}][{j}]" for j in range(self.nodes.size)]
            pair.z_slice = slice(start, len(labels))

        # correction factors
        self.corr_index: list[np.ndarray] = []
        self.corr_steps: list[np.ndarray] = []
        last_p = max(float(t[-1]) for t in self.obs_t)
        for m in self.sources:
            rh = s.rates[m]
            if opt.fit_rate_corrections:
                steps = np.nonzero((rh.times < last_p) & (rh.rates != 0))[0]
            else:
                steps = np.empty(0, dtype=np.int64)
            start = len(labels)
            labels += [f"c[{m}][{k}]" for k in steps]
            self.corr_steps.append(steps)
            self.corr_index.append(np.arange(start, len(labels)))
        self.labels = labels
        self.n_params = len(labels)

        lo = np.full(self.n_params, -np.inf)
        hi = np.full(self.n_params, np.inf)
        for pair in self.pairs:
            if pair.jump_index is not None:
                lo[pair.jump_index] = 0.0
            lo[pair.z_slice] = Z_FLOOR
            hi[pair.z_slice] = Z_CEIL
        band = opt.rate_correction_band
        for ix in self.corr_index:
            lo[ix] = band[0]
            hi[ix] = band[1]
        self.lower, self.upper = lo, hi

        self.n_curv = max(self.nodes.size - 2, 0)
        self.n_q_rows = int(sum(ix.size for ix in self.corr_index))
        self.n_cum_rows = len(s.cumulative_reference)
        self.n_rows = self.n_p_rows + self.n_q_rows + self.n_curv * len(self.pairs) + self.n_cum_rows
        self._static_b = None if self.n_q_rows else self._b_matrices(self._increments(None))

    # -- helpers -------------------------------------------------------------

    def project(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, self.lower, self.upper)

    def _factors(self, x) -> list[np.ndarray]:
        out = []
        for rh, steps, ix in zip(self.q_data, self.corr_steps, self.corr_index):
            c = np.ones(len(rh))
            if x is not None and ix.size:
                c[steps] = x[ix]
            out.append(c)
        return out

    def _increments(self, x) -> list[np.ndarray]:
        return [np.diff(rh.rates * c, prepend=0.0) for rh, c in zip(self.q_data, self._factors(x))]

    def _b_matrices(self, dq: list[np.ndarray]) -> list[np.ndarray]:
        out = []
        for pair in self.pairs:
            n_obs = self.obs_t[pair.observer].size
            w = np.broadcast_to(dq[pair.source][None, :], pair.idx.shape).ravel()
            b = np.bincount(pair.flat, weights=w, minlength=n_obs * self.n_lag_ext)
            out.append(b.reshape(n_obs, self.n_lag_ext))
        return out

    def utr(self, pair: _Pair, x: np.ndarray) -> Utr:
        jump = float(x[pair.jump_index]) if pair.jump_index is not None else 0.0
        return Utr(jump, self.nodes, x[pair.z_slice])

    def p0_values(self, x: np.ndarray) -> np.ndarray:
        return np.array([
            x[self.p0_index[n]] if n in self.p0_index else self.scenario.p0[n] for n in self.observers
        ])

    # -- residuals -----------------------------------------------------------

    def evaluate(self, x: np.ndarray, jacobian: bool = True):
        """Residual vector and (optionally) its Jacobian at ``x``."""
        x = np.asarray(x, dtype=float)
        r = np.empty(self.n_rows)
        J = np.zeros((self.n_rows, self.n_params)) if jacobian else None
        dq = self._increments(x)
        bmats = self._static_b if self._static_b is not None else self._b_matrices(dq)
        p0 = self.p0_values(x)
        model_p = [np.full(t.size, p0[i]) for i, t in enumerate(self.obs_t)]
        for pair, b in zip(self.pairs, bmats):
            u = self.utr(pair, x)
            u_ext = np.append(u(self.lags), 0.0)
            model_p[pair.observer] -= b @ u_ext
            if not jacobian:
                continue
            rows = slice(self.obs_offset[pair.observer], self.obs_offset[pair.observer + 1])
            sw = self.obs_sw[pair.observer][:, None]
            g_ext = np.vstack([u.z_gradient(self.lags), np.zeros((1, self.nodes.size))])
            J[rows, pair.z_slice] -= sw * (b @ g_ext)
            if pair.jump_index is not None:
                J[rows, pair.jump_index] -= sw[:, 0] * (pair.ones @ dq[pair.source])
            ix = self.corr_index[pair.source]
            if ix.size:
                steps = self.corr_steps[pair.source]
                q = self.q_data[pair.source].rates
                diff = u_ext[pair.idx[:, steps]] - u_ext[pair.idx_next[:, steps]]
                J[rows, ix] -= sw * diff * q[steps][None, :]
        for i, n in enumerate(self.observers):
            rows = slice(self.obs_offset[i], self.obs_offset[i + 1])
            r[rows] = self.obs_sw[i] * (model_p[i] - self.obs_p[i])
            if jacobian and n in self.p0_index:
                J[rows, self.p0_index[n]] = self.obs_sw[i]

        row = self.n_p_rows
        sq = math.sqrt(self.opt.rate_weight)
        for rh, steps, ix in zip(self.q_data, self.corr_steps, self.corr_index):
            if ix.size == 0:
                continue
            seg = slice(row, row + ix.size)
            r[seg] = sq * (x[ix] - 1.0) * rh.rates[steps]
            if jacobian:
                J[np.arange(row, row + ix.size), ix] = sq * rh.rates[steps]
            row += ix.size

        sc = math.sqrt(self.opt.lambda_curvature)
        for pair in self.pairs:
            if self.n_curv == 0:
                continue
            seg = slice(row, row + self.n_curv)
            z = x[pair.z_slice]
            r[seg] = sc * np.diff(z, 2)
            if jacobian:
                cols = np.arange(pair.z_slice.start, pair.z_slice.stop)
                for j in range(self.n_curv):
                    J[row + j, cols[j:j + 3]] = sc * np.array([1.0, -2.0, 1.0])
            row += self.n_curv

        if self.n_cum_rows:
            sl = math.sqrt(self.opt.lambda_cumulative)
            factors = self._factors(x)
            for rec in self.scenario.cumulative_reference:
                vol = 0.0
                for name in rec.wells:
                    rh = self.scenario.rates[name]
                    if len(rh) == 0:
                        continue
                    if name in self.sources:
                        im = self.sources.index(name)
                        q = rh.rates * factors[im]
                    else:
                        im, q = None, rh.rates
                    ends = np.append(rh.times[1:], np.inf)
                    overlap = np.clip(np.minimum(ends, rec.end) - np.maximum(rh.times, rec.start), 0.0, None)
                    v = float(q @ overlap)
                    vol += abs(v)
                    if jacobian and im is not None and self.corr_index[im].size:
                        steps = self.corr_steps[im]
                        J[row, self.corr_index[im]] += (
                            sl * math.copysign(1.0, v) * rh.rates[steps] * overlap[steps] / rec.volume
                        )
                r[row] = sl * (vol - rec.volume) / rec.volume
                row += 1
        return (r, J) if jacobian else r

    def objective(self, x: np.ndarray) -> float:
        r = self.evaluate(x, jacobian=False)
        return float(r @ r)

    def model_pressures(self, x: np.ndarray) -> list[np.ndarray]:
        r = self.evaluate(x, jacobian=False)[: self.n_p_rows]
        out = []
        for i in range(len(self.observers)):
            rows = slice(self.obs_offset[i], self.obs_offset[i + 1])
            sw = self.obs_sw[i]
            with np.errstate(divide="ignore", invalid="ignore"):
                res = np.where(sw > 0, r[rows] / np.where(sw > 0, sw, 1.0), np.nan)
            out.append(res + self.obs_p[i])
        return out

    def to_model(self, x: np.ndarray) -> DeconvolutionModel:
        s = self.scenario
        p0 = dict(zip(self.observers, self.p0_values(x).tolist()))
        responses = {}
        for pair, (n, m) in zip(self.pairs, self.pair_names):
            responses[(n, m)] = self.utr(pair, x)
        corrections = {}
        for m, rh, steps, ix in zip(self.sources, self.q_data, self.corr_steps, self.corr_index):
            if ix.size:
                corrections[m] = CorrectionTable(rh.times[steps], x[ix])
        return DeconvolutionModel(p0, UtrMatrix(tuple(s.names), responses), corrections,
                                  self.opt.rate_correction_band)

    def encode(self, model: DeconvolutionModel) -> np.ndarray:
        """Parameter vector of ``model`` (node grids must coincide)."""
        x = np.ones(self.n_params)
        for n, i in self.p0_index.items():
            x[i] = model.p0[n]
        for pair, (n, m) in zip(self.pairs, self.pair_names):
            u = model.utrs.get(n, m)
            if u.node_times.size == 0:
                x[pair.z_slice] = Z_FLOOR
            elif np.array_equal(u.node_times, self.nodes):
                x[pair.z_slice] = u.z
            elif u.node_times.size == 1:
                x[pair.z_slice] = u.z[0]
            else:
                raise ModelError(f"response ({n}, {m}) uses a different node grid")
            if pair.jump_index is not None:
                x[pair.jump_index] = u.jump
        for m, rh, steps, ix in zip(self.sources, self.q_data, self.corr_steps, self.corr_index):
            if ix.size:
                table = model.rate_corrections.get(m)
                x[ix] = table.factors_for(rh.times[steps]) if table else 1.0
        return x

    # -- coarse stage --------------------------------------------------------

    def coarse_layout(self):
        """Bounds of the coarse search: free p0, jumps, one z level per pair."""
        s = self.scenario
        p_all = np.concatenate(self.obs_p)
        span = float(np.ptp(p_all)) or 1.0
        q_max = max(rh.max_abs() for rh in self.q_data) or 1.0
        t_hist = max(s.end_time, 1.0)
        t_min = float(self.nodes[0])
        lo, hi = [], []
        for n in self.observers:
            if n in self.p0_index:
                p_min = float(np.min(self.obs_p[self.observers.index(n)]))
                lo.append(p_min)
                hi.append(p_min + 2.0 * span)
        for pair in self.pairs:
            if pair.jump_index is not None:
                lo.append(0.0)
                hi.append(2.0 * span / q_max)
        z_lo = max(math.log(span / (q_max * t_hist)) - 6.0, Z_FLOOR)
        z_hi = min(math.log(span / (q_max * t_min)) + 2.0, Z_CEIL)
        for _ in self.pairs:
            lo.append(z_lo)
            hi.append(z_hi)
        return np.array(lo), np.array(hi)

    def coarse_to_full(self, c: np.ndarray) -> np.ndarray:
        x = np.ones(self.n_params)
        k = 0
        for n in self.observers:
            if n in self.p0_index:
                x[self.p0_index[n]] = c[k]
                k += 1
        for pair in self.pairs:
            if pair.jump_index is not None:
                x[pair.jump_index] = c[k]
                k += 1
        for pair in self.pairs:
            x[pair.z_slice] = c[k]
            k += 1
        return x

    def coarse_objective(self):
        """Vectorised objective over a population of coarse vectors.

        With one z level the smooth response is ``exp(z) t``, so each pair's
        drawdown is ``jump * A + exp(z) * B`` with ``A``, ``B`` fixed sums
        over the recorded rate steps.
        """
        dq = self._increments(None)
        a_terms = [pair.ones @ dq[pair.source] for pair in self.pairs]
        b_terms = [pair.lagpos @ dq[pair.source] for pair in self.pairs]
        n_p0 = len(self.p0_index)
        jump_pairs = [i for i, pair in enumerate(self.pairs) if pair.jump_index is not None]
        n_jump = len(jump_pairs)
        fixed_p0 = {n: self.scenario.p0[n] for n in self.observers if n not in self.p0_index}
        # constant terms at unit corrections and constant z
        const = 0.0
        if self.n_cum_rows:
            r = self.evaluate(self.coarse_to_full(np.concatenate([
                np.zeros(n_p0 + n_jump), np.zeros(len(self.pairs))])), jacobian=False)
            tail = r[self.n_rows - self.n_cum_rows:]
            const = float(tail @ tail)

        def fun(pop: np.ndarray) -> np.ndarray:
            pop = np.atleast_2d(pop)
            total = np.full(pop.shape[0], const)
            k = 0
            p0_cols = {}
            for n in self.observers:
                if n in self.p0_index:
                    p0_cols[n] = pop[:, k]
                    k += 1
            jumps = {i: pop[:, n_p0 + j] for j, i in enumerate(jump_pairs)}
            levels = np.exp(pop[:, n_p0 + n_jump:])
            for io, n in enumerate(self.observers):
                base = p0_cols[n] if n in p0_cols else np.full(pop.shape[0], fixed_p0[n])
                model = np.repeat(base[:, None], self.obs_t[io].size, axis=1)
                for i, pair in enumerate(self.pairs):
                    if pair.observer != io:
                        continue
                    model -= levels[:, i:i + 1] * b_terms[i][None, :]
                    if i in jumps:
                        model -= jumps[i][:, None] * a_terms[i][None, :]
                res = self.obs_sw[io][None, :] * (model - self.obs_p[io][None, :])
                total += np.einsum("ij,ij->i", res, res)
            return total

        return fun


# ---------------------------------------------------------------------------
# optimisers


def differential_evolution(fun, lower, upper, rng: np.random.Generator, *, population: int = 32,
                           generations: int = 60, f: float = 0.7, cr: float = 0.9):
    """rand/1/bin differential evolution with greedy selection.

    ``fun`` maps a ``(population, dim)`` array to objective values. Returns
    the best vector, its value and the best value after every generation.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    dim = lower.size
    pop = lower + rng.random((population, dim)) * (upper - lower)
    values = fun(pop)
    trace = [float(np.min(values))]
    for _ in range(generations):
        trials = np.empty_like(pop)
        for i in range(population):
            choices = rng.choice(population - 1, 3, replace=False)
            r1, r2, r3 = choices + (choices >= i)
            mutant = pop[r1] + f * (pop[r2] - pop[r3])
            cross = rng.random(dim) < cr
            cross[rng.integers(dim)] = True
            trial = np.where(cross, mutant, pop[i])
            # reflect into the box
            trial = np.where(trial < lower, lower + (lower - trial) % np.maximum(upper - lower, 1e-300), trial)
            trial = np.where(trial > upper, upper - (trial - upper) % np.maximum(upper - lower, 1e-300), trial)
            trials[i] = np.clip(trial, lower, upper)
        trial_values = fun(trials)
        better = trial_values <= values
        pop[better] = trials[better]
        values[better] = trial_values[better]
        trace.append(float(np.min(values)))
        spread = float(np.max(values) - np.min(values))
        if spread <= 1e-14 * max(abs(float(np.min(values))), 1e-300):
            break
    best = int(np.argmin(values))
    return pop[best].copy(), float(values[best]), trace


@dataclass
class _LmResult:
    x: np.ndarray
    value: float
    trace: list
    iterations: int
    status: str


def levenberg_marquardt(evaluate, project, x0, *, max_iter: int, tol: float,
                        reference: float | None = None) -> _LmResult:
    """Projected Levenberg-Marquardt with Marquardt diagonal scaling.

    A step is accepted only when it lowers the objective below both the
    current value and ``reference`` (the best value recorded so far), so the
    returned trace never increases.
    """
    x = project(np.asarray(x0, dtype=float))
    r, J = evaluate(x)
    value = float(r @ r)
    best = value if reference is None else min(value, reference)
    trace = [value] if value <= best else []
    mu = None
    nu = 2.0
    status = BUDGET_EXHAUSTED
    it = 0
    while it < max_iter:
        it += 1
        g = J.T @ r
        H = J.T @ J
        d = np.diag(H).copy()
        d = np.maximum(d, 1e-12 * max(float(np.max(d)), 1e-300))
        if mu is None:
            mu = 1e-3
        accepted = False
        while mu < 1e16:
            A = H + mu * np.diag(d)
            try:
                step = scipy.linalg.solve(A, -g, assume_a="pos")
            except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
                step = np.linalg.lstsq(A, -g, rcond=None)[0]
            x_new = project(x + step)
            r_new = evaluate(x_new, jacobian=False)
            v_new = float(r_new @ r_new)
            if v_new < best:
                # gain ratio of actual to predicted reduction
                dx = x_new - x
                lin = r + J @ dx
                predicted = value - float(lin @ lin)
                rho = (value - v_new) / predicted if predicted > 0 else 0.0
                mu *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
                mu = max(mu, 1e-15)
                nu = 2.0
                accepted = True
                break
            mu *= nu
            nu *= 2.0
        if not accepted:
            status = CONVERGED
            break
        rel = (best - v_new) / max(best, 1e-300)
        x, value, best = x_new, v_new, v_new
        trace.append(value)
        r, J = evaluate(x)
        if rel < tol:
            status = CONVERGED
            break
    return _LmResult(x, value, trace, it, status)


def _null_directions(problem: MdcvProblem, x: np.ndarray, J: np.ndarray):
    """Near-zero curvature directions of the Gauss-Newton Hessian.

    Parameters sitting on a bound are excluded; columns are normalised so
    the ratio measures redundancy rather than units.
    """
    free = (x > problem.lower + 1e-12) & (x < problem.upper - 1e-12)
    cols = np.nonzero(free)[0]
    if cols.size == 0:
        return 0.0, []
    Jf = J[:, cols]
    norms = np.linalg.norm(Jf, axis=0)
    zero = norms == 0
    Jf = Jf / np.where(zero, 1.0, norms)
    w, v = np.linalg.eigh(Jf.T @ Jf)
    top = max(float(w[-1]), 1e-300)
    ratio = max(float(w[0]), 0.0) / top
    directions = []
    for j in range(min(5, w.size)):
        if w[j] / top >= NULL_RATIO:
            break
        vec = v[:, j]
        order = np.argsort(-np.abs(vec))[:3]
        directions.append({
            "eigenvalue_ratio": max(float(w[j]), 0.0) / top,
            "parameters": {problem.labels[cols[i]]: round(float(vec[i]), 6) for i in order},
        })
    return ratio, directions


# ---------------------------------------------------------------------------
# public operations


def deconvolve(training: Scenario, opt: MdcvOptions | None = None, *, force: bool = False,
               initial: DeconvolutionModel | None = None) -> tuple[DeconvolutionModel | None, FitReport]:
    """Fit a deconvolution model to ``training``.

    Returns ``(None, report)`` with status ``no_variation`` when no well in
    the data changes its rate. ``initial`` skips the coarse stage and starts
    the refinement from an existing model on the same node grid.

    Raises
    ------
    DataError
        No pressure samples, or a fatal data-quality flag without ``force``.
    FitError
        Both iteration budgets are zero.
    """
    opt = opt or MdcvOptions()
    start = time.perf_counter()
    qc = qc_report(training)
    if qc.no_variation:
        return None, FitReport(NO_VARIATION, diagnostics={"qc": qc.to_dict()},
                               wall_time=time.perf_counter() - start)
    if "no_pressure_data" in qc.fatal:
        raise DataError("no pressure data to deconvolve")
    if qc.verdict == "fail" and not force:
        raise DataError(f"data quality check failed: {', '.join(qc.fatal)}")
    if opt.gn_iterations == 0 and opt.de_generations == 0 and initial is None:
        raise FitError("optimisation budget is zero")

    problem = MdcvProblem(training, opt)
    rng = np.random.default_rng(opt.seed)
    trace: list[float] = []
    if initial is not None:
        x0 = problem.encode(initial)
    else:
        lo, hi = problem.coarse_layout()
        best, _, de_trace = differential_evolution(
            problem.coarse_objective(), lo, hi, rng, population=opt.de_population,
            generations=opt.de_generations, f=opt.de_f, cr=opt.de_cr,
        )
        trace += de_trace
        x0 = problem.coarse_to_full(best)

    lm = levenberg_marquardt(problem.evaluate, problem.project, x0, max_iter=opt.gn_iterations,
                             tol=opt.tolerance, reference=trace[-1] if trace else None)
    trace += lm.trace
    x = lm.x
    r, J = problem.evaluate(x)
    ratio, directions = _null_directions(problem, x, J)
    status = lm.status
    if opt.gn_iterations == 0:
        status = BUDGET_EXHAUSTED
    if directions:
        # a flat direction outranks both convergence and budget exhaustion
        status = ILL_POSED

    model = problem.to_model(x)
    predicted = problem.model_pressures(x)
    residuals = {n: p - obs for n, p, obs in zip(problem.observers, predicted, problem.obs_p)}
    rmsd, r2 = rmsd_r2(np.concatenate(predicted), np.concatenate(problem.obs_p))
    report = FitReport(
        status,
        objective_trace=trace,
        final_rmsd=rmsd,
        final_r2=r2,
        residuals=residuals,
        n_iterations=lm.iterations,
        diagnostics={
            "n_parameters": problem.n_params,
            "node_times": problem.nodes,
            "active_pairs": [list(p) for p in problem.pair_names],
            "curvature_ratio": ratio,
            "near_null_directions": directions,
            "qc_verdict": qc.verdict,
        },
        wall_time=time.perf_counter() - start,
    )
    return model, report


def correct_rates(model: DeconvolutionModel, s: Scenario) -> dict[str, RateHistory]:
    """Recorded rates times the model's correction factors, clamped to its band."""
    lo, hi = model.band
    out = {}
    for name, rh in s.rates.items():
        table = model.rate_corrections.get(name)
        if table is None:
            out[name] = rh
        else:
            out[name] = RateHistory(rh.times, rh.rates * np.clip(table.factors_for(rh.times), lo, hi))
    return out


def _merge(history: RateHistory, future: RateHistory | None) -> RateHistory:
    if future is None or len(future) == 0:
        return history
    keep = history.times < future.times[0]
    return RateHistory(np.concatenate((history.times[keep], future.times)),
                       np.concatenate((history.rates[keep], future.rates)))


def predict(model: DeconvolutionModel, history: Scenario, *, rates: Mapping[str, RateHistory] | None = None,
            times=None, pressure_targets: Mapping[str, PressureSeries] | None = None,
            start: float | None = None):
    """Forecast with a fitted model, keeping the recorded rates as memory.

    Rate control: pass future ``rates`` (steps replacing the record from
    their first time on) and query ``times``; returns pressures per well.
    Pressure control: pass ``pressure_targets`` for the controlled wells;
    other wells follow ``rates`` merged with the record; returns the
    controlled wells' rates, record included. New steps start at ``start``
    (default: end of the record).
    """
    rates = dict(rates or {})
    merged = {n: _merge(history.rates[n], rates.get(n)) for n in history.names}
    if pressure_targets is None:
        if times is None:
            raise ModelError("rate-control prediction needs query times")
        return simulate_pressure(model, merged, times)
    controlled = list(pressure_targets)
    start = history.end_time if start is None else start
    fixed = {n: rh for n, rh in merged.items() if n not in controlled}
    past = {}
    for n in controlled:
        rh = history.rates[n]
        keep = rh.times <= start
        past[n] = RateHistory(rh.times[keep], rh.rates[keep])
    return simulate_rates(model, pressure_targets, fixed, history=past, start=start)


def jacobian_check(problem: MdcvProblem, x: np.ndarray, step: float = 1e-6) -> float:
    """Largest per-column relative error of the analytic Jacobian.

    Each column is compared with central differences; the error of a column
    is ``max |J_fd - J| / max |J|`` (absolute when the column vanishes).
    """
    x = np.asarray(x, dtype=float)
    _, J = problem.evaluate(x)
    worst = 0.0
    for j in range(problem.n_params):
        h = step * max(1.0, abs(x[j]))
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        fd = (problem.evaluate(xp, jacobian=False) - problem.evaluate(xm, jacobian=False)) / (2 * h)
        scale = float(np.max(np.abs(J[:, j])))
        err = float(np.max(np.abs(fd - J[:, j])))
        worst = max(worst, err / scale if scale > 0 else err)
    return worst
