"""Capacitance-resistance model: simulation, fitting, formation pressure.

Sign conventions follow the rest of the package: rate histories are signed,
production positive and injection negative. A source well ``m`` with signed
rate ``q_m`` drives producer ``n`` through ``-f_nm q_m``, so injection
(negative) supports the producer. With producer interference enabled, offset
producers enter the same way and drain the producer.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import lsq_linear, minimize

from .errors import DataError, InfeasibleAllocation, ModelError
from .reports import CONVERGED, NO_VARIATION, FitReport, rmsd_r2
from .welldata import PressureSeries, RateHistory, Scenario, qc_report

RATE_FIT = "rate_fit"
PRESSURE_FIT = "pressure_fit"
ICRM_FIT = "icrm_fit"
WEIGHTED_COMBO = "weighted_combo"
FIT_KINDS = (RATE_FIT, PRESSURE_FIT, ICRM_FIT, WEIGHTED_COMBO)

TAU_MIN = 0.01


def _readonly(values, shape, name) -> np.ndarray:
    arr = np.array(values, dtype=float).reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ModelError(f"{name} must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class CrmModel:
    """Per-producer time constants and capacitances with a connectivity table.

    Attributes
    ----------
    producers, injectors : well names
    tau : days, one per producer
    gamma : m3/bar, one per producer
    connectivity : fractions, ``(n_producers, n_injectors)``
    interference : optional ``(n_producers, n_producers)`` fractions for the
        producer-producer extension, zero diagonal
    """

    producers: tuple[str, ...]
    injectors: tuple[str, ...]
    tau: np.ndarray
    gamma: np.ndarray
    connectivity: np.ndarray
    interference: np.ndarray | None = None

    def __post_init__(self):
        prods, injs = tuple(self.producers), tuple(self.injectors)
        if len(set(prods + injs)) != len(prods + injs):
            raise ModelError("duplicate well names in CRM model")
        n_p, n_i = len(prods), len(injs)
        tau = _readonly(self.tau, (n_p,), "tau")
        gamma = _readonly(self.gamma, (n_p,), "gamma")
        f = _readonly(self.connectivity, (n_p, n_i), "connectivity")
        if np.any(tau < 0) or np.any(gamma < 0):
            raise ModelError("tau and gamma must be >= 0")
        if np.any(f < 0) or np.any(f > 1):
            raise ModelError("connectivity fractions must lie in [0, 1]")
        if n_i and np.any(f.sum(axis=0) > 1 + 1e-12):
            raise ModelError("connectivity of an injector sums above 1 over producers")
        g = None
        if self.interference is not None:
            g = _readonly(self.interference, (n_p, n_p), "interference")
            if np.any(g < 0) or np.any(g > 1) or np.any(np.diag(g) != 0):
                raise ModelError("interference fractions must lie in [0, 1] with zero diagonal")
        for name, value in (("producers", prods), ("injectors", injs), ("tau", tau),
                            ("gamma", gamma), ("connectivity", f), ("interference", g)):
            object.__setattr__(self, name, value)

    def __eq__(self, other):
        if not isinstance(other, CrmModel):
            return NotImplemented
        same_g = (self.interference is None and other.interference is None) or (
            self.interference is not None and other.interference is not None
            and np.array_equal(self.interference, other.interference)
        )
        return (
            self.producers == other.producers and self.injectors == other.injectors
            and np.array_equal(self.tau, other.tau) and np.array_equal(self.gamma, other.gamma)
            and np.array_equal(self.connectivity, other.connectivity) and same_g
        )

    __hash__ = None

    @property
    def productivity(self) -> np.ndarray:
        """J = gamma / tau (inf where tau = 0)."""
        with np.errstate(divide="ignore"):
            return np.where(self.tau > 0, self.gamma / np.where(self.tau > 0, self.tau, 1.0), np.inf)

    def index(self, producer: str) -> int:
        try:
            return self.producers.index(producer)
        except ValueError:
            raise ModelError(f"{producer!r} is not a producer of this model") from None

    def sources(self, producer: str) -> list[tuple[str, float]]:
        """``(source well, fraction)`` pairs driving ``producer``."""
        i = self.index(producer)
        out = [(m, float(self.connectivity[i, j])) for j, m in enumerate(self.injectors)]
        if self.interference is not None:
            out += [(m, float(self.interference[i, k])) for k, m in enumerate(self.producers) if k != i]
        return out

    def to_dict(self) -> dict:
        d = {
            "producers": [
                {"id": n, "tau_days": float(t), "gamma_m3_per_bar": float(g)}
                for n, t, g in zip(self.producers, self.tau, self.gamma)
            ],
            "injectors": list(self.injectors),
            "connectivity": {
                n: {m: float(self.connectivity[i, j]) for j, m in enumerate(self.injectors)}
                for i, n in enumerate(self.producers)
            },
        }
        if self.interference is not None:
            d["interference"] = {
                n: {m: float(self.interference[i, k]) for k, m in enumerate(self.producers) if k != i}
                for i, n in enumerate(self.producers)
            }
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "CrmModel":
        try:
            prods = [p["id"] for p in d["producers"]]
            tau = [p["tau_days"] for p in d["producers"]]
            gamma = [p["gamma_m3_per_bar"] for p in d["producers"]]
            conn = d.get("connectivity", {})
            injs = list(d.get("injectors") or sorted({m for row in conn.values() for m in row}))
            f = [[conn.get(n, {}).get(m, 0.0) for m in injs] for n in prods]
            g = None
            if "interference" in d:
                inter = d["interference"]
                g = [[0.0 if n == k else inter.get(n, {}).get(k, 0.0) for k in prods] for n in prods]
        except (KeyError, TypeError) as exc:
            raise ModelError(f"malformed CRM model: {exc}") from exc
        return cls(tuple(prods), tuple(injs), tau, gamma, np.reshape(np.array(f, dtype=float), (len(prods), len(injs))), g)


@dataclass(frozen=True)
class CrmFitMode:
    """Objective used by :func:`crm_fit`.

    ``rate_fit`` matches producer rate records, ``pressure_fit`` matches
    bottomhole pressures through the integrated balance, ``icrm_fit`` matches
    cumulative volumes and ``weighted_combo`` mixes rate and cumulative rows.
    """

    kind: str = PRESSURE_FIT
    rate_weight: float = 1.0
    icrm_weight: float = 1.0

    def __post_init__(self):
        if self.kind not in FIT_KINDS:
            raise ModelError(f"unknown CRM fit mode {self.kind!r}")
        if self.rate_weight < 0 or self.icrm_weight < 0 or (self.rate_weight == 0 and self.icrm_weight == 0):
            raise ModelError("combo weights must be >= 0 and not all zero")


# ---------------------------------------------------------------------------
# simulation


def _decay(dt: np.ndarray, tau: float) -> np.ndarray:
    if tau == 0:
        return np.zeros_like(dt)
    return np.exp(-dt / tau)


def _rate_grid(bhp: PressureSeries, drivers: Sequence[RateHistory], extra=()) -> np.ndarray:
    t0, t1 = bhp.times[0], bhp.times[-1]
    pieces = [bhp.times] + [rh.times for rh in drivers] + [np.asarray(e, dtype=float) for e in extra]
    grid = np.unique(np.concatenate(pieces))
    return grid[(grid >= t0) & (grid <= t1)]


def _rate_channels(tau: float, grid: np.ndarray, bhp: PressureSeries, drivers: Sequence[RateHistory]):
    """Point rates at ``grid`` split into linear channels.

    Returns ``(E, X, Y)`` with ``q = q0 E + sum_m f_m X[m] + gamma Y``.
    Within each grid interval the drivers are constant and the BHP is linear,
    which makes the exponential update exact.
    """
    dt = np.diff(grid)
    if np.any(dt < 0):
        raise DataError("negative time step")
    e = _decay(dt, tau)
    slope = np.diff(np.interp(grid, bhp.times, bhp.pressures)) / np.where(dt > 0, dt, 1.0)
    forcing = np.array([-rh.value_at(grid[:-1], side="right") for rh in drivers]).reshape(len(drivers), -1)
    n = grid.size
    E = np.empty(n)
    X = np.zeros((len(drivers), n))
    Y = np.zeros(n)
    E[0] = 1.0
    for i in range(n - 1):
        w = 1.0 - e[i]
        E[i + 1] = E[i] * e[i]
        X[:, i + 1] = X[:, i] * e[i] + w * forcing[:, i]
        Y[i + 1] = Y[i] * e[i] - w * slope[i]
    return E, X, Y


def crm_simulate_rates(
    m: CrmModel,
    injections: Mapping[str, RateHistory],
    bhp: Mapping[str, PressureSeries],
    q0: Mapping[str, float],
) -> dict[str, RateHistory]:
    """Producer rates driven by injection and bottomhole pressure.

    The simulation for each producer runs from its first BHP sample to its
    last, on the union of BHP sample times and injection step times. Returned
    histories hold the point rate at each grid time until the next one.
    ``injections`` is keyed by source well; with interference enabled it must
    also carry the offset producers' rates.
    """
    out = {}
    for n in m.producers:
        if n not in bhp or len(bhp[n]) < 1:
            raise DataError(f"no bottomhole pressure for producer {n!r}")
        i = m.index(n)
        pairs = [(src, f) for src, f in m.sources(n) if f != 0.0]
        drivers = []
        for src, _ in pairs:
            if src not in injections:
                raise DataError(f"rates of source well {src!r} are required")
            drivers.append(injections[src])
        grid = _rate_grid(bhp[n], drivers)
        E, X, Y = _rate_channels(float(m.tau[i]), grid, bhp[n], drivers)
        q = q0.get(n, 0.0) * E + Y * m.gamma[i]
        if pairs:
            q = q + np.array([f for _, f in pairs]) @ X
        out[n] = RateHistory(grid, q)
    return out


def _pressure_basis(tau, production: RateHistory, t, t_start, q_start):
    """``tau (q(t-) - q(start)) + Q(t)`` with exact step cumulatives."""
    q = production.value_at(t, side="left")
    vol = production.cumulative(t) - production.cumulative(t_start)
    return tau * (q - q_start) + vol


def crm_simulate_pressure(
    m: CrmModel,
    production: Mapping[str, RateHistory],
    injections: Mapping[str, RateHistory],
    p_start: Mapping[str, float],
    times,
    *,
    t_start: float = 0.0,
) -> dict[str, PressureSeries]:
    """Bottomhole pressure from the integrated balance.

    ``p(t) = p(start) - (tau/gamma)[q(t) - q(start)] - Q(t)/gamma
    - sum_m f_m Q_m(t)/gamma`` with ``Q`` the signed volumes since
    ``t_start`` and ``q`` the rate acting just before each instant.
    ``times`` is one array or a mapping per producer.
    """
    out = {}
    sources_all = {**injections, **production}
    for n in m.producers:
        i = m.index(n)
        if m.gamma[i] == 0:
            raise ModelError(f"gamma of {n!r} is zero")
        t = np.asarray(times[n] if isinstance(times, Mapping) else times, dtype=float)
        rh = production.get(n, RateHistory.empty())
        q_start = float(rh.value_at(t_start, side="left"))
        drawdown = _pressure_basis(float(m.tau[i]), rh, t, t_start, q_start)
        for src, f in m.sources(n):
            if f == 0.0:
                continue
            src_rh = sources_all.get(src)
            if src_rh is None:
                raise DataError(f"rates of source well {src!r} are required")
            drawdown = drawdown + f * (src_rh.cumulative(t) - src_rh.cumulative(t_start))
        out[n] = PressureSeries(t, p_start[n] - drawdown / m.gamma[i])
    return out


def icrm_pressure(
    m: CrmModel,
    production: Mapping[str, RateHistory],
    injections: Mapping[str, RateHistory],
    p0: Mapping[str, float],
    times,
) -> dict[str, PressureSeries]:
    """Bottomhole pressure from the cumulative (ICRM) balance.

    Solves ``tau q + Q = -sum_m f_m Q_m + gamma (p0 - p_wf)`` for ``p_wf``
    term by term, as an independent path to :func:`crm_simulate_pressure`
    for histories starting from rest.
    """
    out = {}
    sources_all = {**injections, **production}
    for n in m.producers:
        i = m.index(n)
        if m.gamma[i] == 0:
            raise ModelError(f"gamma of {n!r} is zero")
        t = np.asarray(times[n] if isinstance(times, Mapping) else times, dtype=float)
        rh = production.get(n, RateHistory.empty())
        lhs = m.tau[i] * rh.value_at(t, side="left") + rh.cumulative(t)
        support = np.zeros_like(t)
        for src, f in m.sources(n):
            if f:
                support -= f * sources_all[src].cumulative(t)
        out[n] = PressureSeries(t, p0[n] - (lhs - support) / m.gamma[i])
    return out


def formation_pressure(m: CrmModel, bhp: PressureSeries, rate: RateHistory, producer: str) -> PressureSeries:
    """Formation pressure ``p_wf + q/J`` at each BHP sample time."""
    i = m.index(producer)
    if m.gamma[i] == 0:
        raise ModelError(f"productivity of {producer!r} is zero")
    q = rate.value_at(bhp.times, side="left")
    return PressureSeries(bhp.times, bhp.pressures + q * m.tau[i] / m.gamma[i], bhp.weights)


# ---------------------------------------------------------------------------
# fitting


@dataclass
class _Problem:
    """Rows of one producer's linear least-squares problem for fixed tau.

    Columns are ``[f_1..f_k, gamma-like, c]`` depending on mode; ``f_cols``
    flags connectivity columns. For pressure mode the columns are
    ``[p0, a, b_1..b_k]`` with ``a = 1/gamma`` and ``b = f/gamma``.
    """

    A: np.ndarray
    y: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    n_src: int
    fixed: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.fixed is None:
            self.fixed = np.zeros(self.A.shape[1], dtype=bool)


@dataclass(frozen=True)
class _ProducerData:
    name: str
    sources: tuple[str, ...]
    source_rates: tuple[RateHistory, ...]
    n_injectors: int
    rates: RateHistory
    bhp: PressureSeries
    p0: float | None


def _build_problem(kind_rows: str, tau: float, d: _ProducerData) -> _Problem:
    k = len(d.sources)
    if kind_rows == RATE_FIT:
        # unknowns [f..., gamma]
        grid = _rate_grid(d.bhp, d.source_rates, extra=[d.rates.times])
        E, X, Y = _rate_channels(tau, grid, d.bhp, d.source_rates)
        rec = d.rates.times[(d.rates.times >= grid[0]) & (d.rates.times <= grid[-1])]
        idx = np.searchsorted(grid, rec)
        q0 = float(d.rates.value_at(grid[0], side="right"))
        y = d.rates.value_at(rec, side="right") - q0 * E[idx]
        A = np.column_stack([X[:, idx].T, Y[idx]]) if k else Y[idx][:, None]
        lower = np.zeros(k + 1)
        upper = np.concatenate([np.ones(k), [np.inf]])
        return _Problem(A, y, lower, upper, k)

    t = d.bhp.times
    sw = np.sqrt(d.bhp.weights)
    q_start = float(d.rates.value_at(0.0, side="left"))
    basis = _pressure_basis(tau, d.rates, t, 0.0, q_start)
    vols = np.array([rh.cumulative(t) for rh in d.source_rates]).reshape(k, -1)
    if kind_rows == PRESSURE_FIT:
        # p = p0 - a basis - sum b_m vol_m ; unknowns [p0, a, b...]
        A = np.column_stack([np.ones_like(t), -basis, -vols.T])
        y = d.bhp.pressures.copy()
        lower = np.concatenate([[-np.inf, 0.0], np.zeros(k)])
        upper = np.full(k + 2, np.inf)
        fixed = np.zeros(k + 2, dtype=bool)
        if d.p0 is not None:
            y = y - d.p0
            A[:, 0] = 0.0
            fixed[0] = True
            lower[0] = upper[0] = 0.0
        return _Problem(A * sw[:, None], y * sw, lower, upper, k, fixed)
    # icrm rows: basis = -sum f vol + gamma (p0 - p_wf); unknowns [f..., gamma, c]
    A = np.column_stack([-vols.T, -d.bhp.pressures, np.ones_like(t)])
    y = basis.copy()
    lower = np.zeros(k + 2)
    upper = np.concatenate([np.ones(k), [np.inf, np.inf]])
    fixed = np.zeros(k + 2, dtype=bool)
    if d.p0 is not None:
        A[:, k] = d.p0 - d.bhp.pressures
        A[:, k + 1] = 0.0
        fixed[k + 1] = True
        upper[k + 1] = 0.0
    return _Problem(A * sw[:, None], y * sw, lower, upper, k, fixed)


def _stack(problems: Sequence[_Problem], weights: Sequence[float]) -> _Problem:
    """Stack rate rows ``[f, gamma]`` with icrm rows ``[f, gamma, c]``."""
    rate, icrm = problems
    A_rate = np.column_stack([rate.A, np.zeros(rate.A.shape[0])])
    A = np.vstack([math.sqrt(weights[0]) * A_rate, math.sqrt(weights[1]) * icrm.A])
    y = np.concatenate([math.sqrt(weights[0]) * rate.y, math.sqrt(weights[1]) * icrm.y])
    return _Problem(A, y, icrm.lower, icrm.upper, icrm.n_src, icrm.fixed)


def _problem(mode: CrmFitMode, tau: float, d: _ProducerData) -> _Problem:
    if mode.kind == WEIGHTED_COMBO:
        return _stack([_build_problem(RATE_FIT, tau, d), _build_problem(ICRM_FIT, tau, d)],
                      [mode.rate_weight, mode.icrm_weight])
    return _build_problem(mode.kind, tau, d)


def _solve_single(kind: str, prob: _Problem) -> np.ndarray:
    """Bounded least squares for one producer, keeping each f in [0, 1]."""
    x = np.zeros(prob.A.shape[1])
    free = ~prob.fixed
    if prob.A.shape[0] == 0:
        return x
    res = lsq_linear(prob.A[:, free], prob.y, bounds=(prob.lower[free], prob.upper[free]),
                     method="bvls", tol=1e-14)
    x[free] = res.x
    if kind == PRESSURE_FIT and prob.n_src and np.any(x[2:] > x[1] * (1 + 1e-12)):
        x = _pressure_slsqp(prob, x)
    return x


def _pressure_slsqp(prob: _Problem, x0: np.ndarray) -> np.ndarray:
    """Pressure fit in ``(p0, a, f)`` form with f in [0, 1].

    The linear ``(p0, a, b)`` form can only express ``f <= 1`` as ``b <= a``;
    switching to ``b = a f`` turns it into a plain bound.
    """
    k = prob.n_src
    a0 = max(x0[1], 1e-12)
    z0 = np.concatenate([[0.0 if prob.fixed[0] else x0[0], a0], np.clip(x0[2:] / a0, 0, 1)])

    def unpack(z):
        return np.concatenate([[z[0], z[1]], z[1] * z[2:]])

    def fun(z):
        r = prob.A @ unpack(z) - prob.y
        return 0.5 * float(r @ r)

    def jac(z):
        gl = prob.A.T @ (prob.A @ unpack(z) - prob.y)
        g = np.empty_like(z)
        g[0] = 0.0 if prob.fixed[0] else gl[0]
        g[1] = gl[1] + float(gl[2:] @ z[2:])
        g[2:] = gl[2:] * z[1]
        return g

    bounds = [(0.0, 0.0) if prob.fixed[0] else (None, None), (0.0, None)] + [(0.0, 1.0)] * k
    res = minimize(fun, z0, jac=jac, method="SLSQP", bounds=bounds, options={"ftol": 1e-15, "maxiter": 500})
    return unpack(res.x)


def _golden(fun, lo, hi, tol=1e-6, max_iter=200):
    """Golden-section minimum of ``fun`` on ``[lo, hi]`` (log-tau units)."""
    inv = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c = b - inv * (b - a)
    d = a + inv * (b - a)
    fc, fd = fun(c), fun(d)
    for _ in range(max_iter):
        if abs(b - a) < tol:
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - inv * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv * (b - a)
            fd = fun(d)
    return (c, fc) if fc <= fd else (d, fd)


def _sse(prob: _Problem, x: np.ndarray) -> float:
    r = prob.A @ x - prob.y
    return float(r @ r)


def _fit_tau(mode: CrmFitMode, d: _ProducerData, tau_max: float, trace: list) -> tuple[float, np.ndarray, float]:
    cache: dict[float, tuple[float, np.ndarray]] = {}

    def evaluate(log_tau: float) -> float:
        if log_tau not in cache:
            prob = _problem(mode, math.exp(log_tau), d)
            x = _solve_single(mode.kind, prob)
            cache[log_tau] = (_sse(prob, x), x)
            best = cache[log_tau][0] if not trace else min(trace[-1], cache[log_tau][0])
            trace.append(best)
        return cache[log_tau][0]

    lo, hi = math.log(TAU_MIN), math.log(tau_max)
    scan = np.linspace(lo, hi, 25)
    values = [evaluate(float(v)) for v in scan]
    j = int(np.argmin(values))
    a = float(scan[max(j - 1, 0)])
    b = float(scan[min(j + 1, scan.size - 1)])
    log_tau, _ = _golden(evaluate, a, b, tol=1e-9)
    best = min(cache, key=lambda v: cache[v][0])
    return math.exp(best), cache[best][1], cache[best][0]


def _unpack(kind: str, x: np.ndarray, k: int) -> tuple[float, np.ndarray, float | None]:
    """(gamma, f, p0) from a solution vector."""
    if kind == PRESSURE_FIT:
        a = x[1]
        gamma = 1.0 / a if a > 0 else math.inf
        f = x[2:] / a if a > 0 else np.zeros(k)
        return gamma, f, x[0]
    gamma = x[k]
    p0 = x[k + 1] / gamma if kind in (ICRM_FIT, WEIGHTED_COMBO) and gamma > 0 else None
    return gamma, x[:k], p0


def _joint_allocation(kind, problems, xs, n_inj, strict):
    """Refit all producers at fixed tau with injector column-sum constraints."""
    n_p = len(problems)
    k = problems[0].n_src
    sizes = []
    z0 = []
    bounds = []
    for prob, x in zip(problems, xs):
        fixed = bool(prob.fixed[0])
        if kind == PRESSURE_FIT:
            a = max(x[1], 1e-12)
            z0 += [x[0] if not fixed else 0.0, a] + list(np.clip(x[2:] / a, 0, 1))
            bounds += [(0.0, 0.0) if fixed else (None, None), (0.0, None)] + [(0.0, 1.0)] * k
        else:
            z0 += list(np.clip(x, prob.lower, prob.upper))
            bounds += [(lo, None if math.isinf(hi) else hi) for lo, hi in zip(prob.lower, prob.upper)]
        sizes.append(prob.A.shape[1])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    f_off = 2 if kind == PRESSURE_FIT else 0
    scales = [max(float(prob.y @ prob.y), 1e-30) for prob in problems]

    def unpack(z, i):
        zi = z[offsets[i]:offsets[i + 1]]
        if kind == PRESSURE_FIT:
            return np.concatenate([[zi[0], zi[1]], zi[1] * zi[2:]])
        return zi

    def fun(z):
        total = 0.0
        for i, prob in enumerate(problems):
            r = prob.A @ unpack(z, i) - prob.y
            total += 0.5 * float(r @ r) / scales[i]
        return total

    def jac(z):
        g = np.zeros_like(z)
        for i, prob in enumerate(problems):
            zi = z[offsets[i]:offsets[i + 1]]
            r = prob.A @ unpack(z, i) - prob.y
            gl = prob.A.T @ r / scales[i]
            if kind == PRESSURE_FIT:
                gi = np.empty_like(zi)
                gi[0] = gl[0]
                gi[1] = gl[1] + float(gl[2:] @ zi[2:])
                gi[2:] = gl[2:] * zi[1]
            else:
                gi = gl
            g[offsets[i]:offsets[i + 1]] = gi
        return g

    cons = []
    for j in range(n_inj):
        idx = np.array([offsets[i] + f_off + j for i in range(n_p)])
        row = np.zeros(offsets[-1])
        row[idx] = 1.0
        if strict:
            cons.append({"type": "eq", "fun": lambda z, row=row: float(row @ z) - 1.0, "jac": lambda z, row=row: row})
        else:
            cons.append({"type": "ineq", "fun": lambda z, row=row: 1.0 - float(row @ z), "jac": lambda z, row=row: -row})
    res = minimize(fun, np.array(z0, dtype=float), jac=jac, method="SLSQP", bounds=bounds,
                   constraints=cons, options={"ftol": 1e-16, "maxiter": 1000})
    z = res.x
    if strict:
        for j in range(n_inj):
            total = sum(z[offsets[i] + f_off + j] for i in range(n_p))
            if abs(total - 1.0) > 1e-6:
                raise InfeasibleAllocation(f"strict allocation cannot be met for injector column {j}")
    return [unpack(z, i) for i in range(n_p)]


def _project(f: np.ndarray, strict: bool) -> np.ndarray:
    """Clip to [0, 1] and make column sums <= 1 (== 1 when strict) exactly."""
    f = np.clip(np.array(f, dtype=float), 0.0, 1.0)
    for j in range(f.shape[1]):
        col = f[:, j]
        total = float(np.sum(col))
        if strict:
            if total <= 0:
                raise InfeasibleAllocation(f"injector column {j} has no supported producer")
            col = col / total
        elif total > 1.0:
            col = col / total
        # absorb rounding so the column sum meets its bound exactly
        for _ in range(8):
            total = float(np.sum(col))
            if (strict and total == 1.0) or (not strict and total <= 1.0):
                break
            i = int(np.argmax(col))
            col[i] = min(1.0, max(0.0, col[i] + (1.0 - total)))
        f[:, j] = col
    return f


def _producer_data(s: Scenario, interference: bool) -> list[_ProducerData]:
    data = []
    for n in s.producers:
        srcs = list(s.injectors)
        if interference:
            srcs += [p for p in s.producers if p != n]
        data.append(_ProducerData(
            n, tuple(srcs), tuple(s.rates[m] for m in srcs), len(s.injectors),
            s.rates[n], s.pressures[n], s.p0.get(n),
        ))
    return data


def _history_length(s: Scenario) -> float:
    return max(s.end_time, 1.0)


def crm_fit(
    training: Scenario,
    mode: CrmFitMode | str = PRESSURE_FIT,
    strict_allocation: bool = False,
    *,
    interference: bool = False,
) -> tuple[CrmModel | None, FitReport]:
    """Fit tau, gamma and connectivity per producer.

    For fixed tau each objective is linear in the remaining parameters, so a
    bounded linear solve sits inside a one-dimensional search over log tau
    (coarse scan followed by golden section on [0.01, 10 x history] days).
    When injector column sums exceed 1, or in strict mode, all producers are
    refitted jointly under the allocation constraints at the selected taus.

    Returns ``(None, report)`` with status ``no_variation`` when no well in the
    training data varies its rate.
    """
    start = time.perf_counter()
    if isinstance(mode, str):
        mode = CrmFitMode(mode)
    if not training.producers:
        raise DataError("CRM fit needs at least one producer")
    if qc_report(training).no_variation:
        return None, FitReport(NO_VARIATION, wall_time=time.perf_counter() - start)
    data = _producer_data(training, interference)
    for d in data:
        if mode.kind != RATE_FIT and len(d.bhp) == 0:
            raise DataError(f"producer {d.name!r} has no pressure data")
        if mode.kind in (RATE_FIT, WEIGHTED_COMBO) and len(d.bhp) < 2:
            raise DataError(f"producer {d.name!r} needs bottomhole pressures for rate simulation")
    n_inj = len(training.injectors)
    tau_max = 10.0 * _history_length(training)
    kind = ICRM_FIT if mode.kind == WEIGHTED_COMBO else mode.kind

    trace: list[float] = []
    taus, xs, problems = [], [], []
    for d in data:
        tr: list[float] = []
        tau, x, _ = _fit_tau(mode, d, tau_max, tr)
        taus.append(tau)
        xs.append(x)
        problems.append(_problem(mode, tau, d))
        trace.append(tr)
    fsum = np.zeros(n_inj)
    for x, d in zip(xs, data):
        _, f, _ = _unpack(kind, x, len(d.sources))
        fsum += f[:n_inj]
    joint = bool(n_inj) and (strict_allocation or bool(np.any(fsum > 1 + 1e-12)))
    if joint:
        if interference:
            raise ModelError("allocation constraints with producer interference are not supported")
        xs = _joint_allocation(kind, problems, xs, n_inj, strict_allocation)

    gammas, rows, inter_rows, p0_fit = [], [], [], {}
    for x, d in zip(xs, data):
        gamma, f, p0 = _unpack(kind, x, len(d.sources))
        gammas.append(gamma)
        rows.append(f[:n_inj])
        inter_rows.append(f[n_inj:])
        p0_fit[d.name] = d.p0 if d.p0 is not None else (None if p0 is None else float(p0))
    if not all(math.isfinite(g) and g > 0 for g in gammas):
        raise ModelError("fit produced a non-positive or unbounded capacitance")
    f_mat = _project(np.array(rows).reshape(len(data), n_inj), strict_allocation) if n_inj else np.zeros((len(data), 0))
    g_mat = None
    if interference:
        n_p = len(data)
        g_mat = np.zeros((n_p, n_p))
        for i, r in enumerate(inter_rows):
            g_mat[i, [k for k in range(n_p) if k != i]] = np.clip(r, 0, 1)
    model = CrmModel(tuple(training.producers), tuple(training.injectors), taus, gammas, f_mat, g_mat)

    predicted, actual, residuals, objective = _fit_residuals(model, training, mode, p0_fit)
    rmsd, r2 = rmsd_r2(predicted, actual) if actual.size else (None, None)
    merged = _merge_traces(trace)
    if not merged or objective < merged[-1]:
        merged.append(objective)
    report = FitReport(
        CONVERGED,
        objective_trace=merged,
        final_rmsd=rmsd,
        final_r2=r2,
        residuals=residuals,
        n_iterations=sum(len(t) for t in trace),
        diagnostics={
            "mode": mode.kind,
            "strict_allocation": strict_allocation,
            "joint_allocation": joint,
            "p0": p0_fit,
            "objective_per_producer": {n: float(r @ r) for n, r in residuals.items()},
        },
        wall_time=time.perf_counter() - start,
    )
    return model, report


def _merge_traces(traces: list[list[float]]) -> list[float]:
    """Sum of per-producer best-so-far objectives, one entry per evaluation."""
    if not traces:
        return []
    length = max(len(t) for t in traces)
    out = []
    for i in range(length):
        out.append(sum(t[min(i, len(t) - 1)] for t in traces))
    return out


def _fit_residuals(model: CrmModel, s: Scenario, mode: CrmFitMode, p0_fit: Mapping[str, float | None]):
    """Model-minus-data on the primary observable of the fit mode."""
    predicted, actual, residuals = [], [], {}
    if mode.kind in (RATE_FIT, WEIGHTED_COMBO):
        q0 = {n: float(s.rates[n].value_at(s.pressures[n].times[0], side="right")) for n in model.producers}
        sim = crm_simulate_rates(model, s.rates, s.pressures, q0)
        for n in model.producers:
            rec = s.rates[n]
            t = rec.times[(rec.times >= sim[n].times[0]) & (rec.times <= sim[n].times[-1])]
            pred = sim[n].value_at(t, side="right")
            obs = rec.value_at(t, side="right")
            predicted.append(pred)
            actual.append(obs)
            residuals[n] = pred - obs
    else:
        times = {n: s.pressures[n].times for n in model.producers}
        p_start = {n: float(p0_fit[n]) for n in model.producers}
        sim = crm_simulate_pressure(model, s.rates, {m: s.rates[m] for m in s.injectors}, p_start, times)
        for n in model.producers:
            predicted.append(sim[n].pressures)
            actual.append(s.pressures[n].pressures)
            residuals[n] = sim[n].pressures - s.pressures[n].pressures
    predicted = np.concatenate(predicted) if predicted else np.empty(0)
    actual = np.concatenate(actual) if actual else np.empty(0)
    objective = float(np.sum((predicted - actual) ** 2))
    return predicted, actual, residuals, objective
