"""Unit-rate transient responses (drawdown and cross-well).

A response is ``jump * theta(t) + integral_0^t exp(z(ln s)) ds`` where the
log-derivative ``z`` is piecewise linear in ``ln t`` between nodes and held
constant outside them. Every segment integrates in closed form, so
evaluation involves no quadrature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy import optimize, special

from .errors import ModelError

# log-derivative bounds used by the optimiser; exp(-60) ~ 1e-26 bar/(m3/d)/day
Z_FLOOR = -60.0
Z_CEIL = 30.0


def _exp_exprel(z, x):
    """``exp(z) * (exp(x) - 1) / x`` without overflow for large ``x``."""
    z = np.asarray(z, dtype=float)
    x = np.asarray(x, dtype=float)
    small = x <= 50.0
    with np.errstate(over="ignore", invalid="ignore"):
        a = np.exp(z) * special.exprel(np.where(small, x, 0.0))
        xs = np.where(small, 1.0, x)
        b = (np.exp(z + xs) - np.exp(z)) / xs
    return np.where(small, a, b)


def _exp_g(z, x):
    """``exp(z) * integral_0^1 v exp(x v) dv``, stable near ``x = 0``."""
    z = np.asarray(z, dtype=float)
    x = np.asarray(x, dtype=float)
    tiny = np.abs(x) < 1e-3
    xs = np.where(tiny, 1.0, x)
    with np.errstate(over="ignore", invalid="ignore"):
        series = 0.5 + x / 3.0 + x * x / 8.0 + x**3 / 30.0 + x**4 / 144.0
        closed = (np.exp(z + xs) * (xs - 1.0) + np.exp(z)) / (xs * xs)
    return np.where(tiny, np.exp(z) * series, closed)


@dataclass(frozen=True, eq=False)
class Utr:
    """Unit-rate transient response, bar per (m3/day).

    Parameters
    ----------
    jump : float
        Coefficient of the Heaviside term (instantaneous response), >= 0.
    node_times : array
        Strictly increasing positive node times (days). Empty means the
        smooth part is identically zero.
    z : array
        Log of the time derivative of the response at each node.
    """

    jump: float = 0.0
    node_times: np.ndarray = field(default_factory=lambda: np.empty(0))
    z: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        t = np.array(self.node_times, dtype=float).reshape(-1)
        z = np.array(self.z, dtype=float).reshape(-1)
        jump = float(self.jump)
        if not math.isfinite(jump) or jump < 0:
            raise ModelError(f"UTR jump must be finite and >= 0, got {jump}")
        if t.shape != z.shape:
            raise ModelError("UTR node times and log-derivatives differ in length")
        if t.size and (t[0] <= 0 or np.any(np.diff(t) <= 0)):
            raise ModelError("UTR node times must be positive and strictly increasing")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(z))):
            raise ModelError("UTR nodes must be finite")
        t.setflags(write=False)
        z.setflags(write=False)
        object.__setattr__(self, "jump", jump)
        object.__setattr__(self, "node_times", t)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "_log_t", np.log(t))
        object.__setattr__(self, "_cum", self._node_integrals())

    def __eq__(self, other):
        if not isinstance(other, Utr):
            return NotImplemented
        return (
            self.jump == other.jump
            and np.array_equal(self.node_times, other.node_times)
            and np.array_equal(self.z, other.z)
        )

    __hash__ = None

    @property
    def is_zero(self) -> bool:
        return self.jump == 0.0 and self.node_times.size == 0

    def with_z(self, z, jump=None) -> "Utr":
        return Utr(self.jump if jump is None else jump, self.node_times, z)

    # -- internals -----------------------------------------------------------

    def _segments(self):
        h = np.diff(self._log_t)
        a = np.diff(self.z) / h + 1.0
        return h, a

    def _node_integrals(self):
        k = self.node_times.size
        if k == 0:
            return np.empty(0)
        cum = np.empty(k)
        cum[0] = math.exp(self.z[0]) * self.node_times[0]
        if k > 1:
            h, a = self._segments()
            seg = self.node_times[:-1] * h * _exp_exprel(self.z[:-1], a * h)
            cum[1:] = cum[0] + np.cumsum(seg)
        return cum

    def _locate(self, t):
        """Segment index per positive time: -1 before first node, k-1 after last."""
        return np.searchsorted(self._log_t, np.log(t), side="right") - 1

    # -- evaluation ----------------------------------------------------------

    def smooth(self, t) -> np.ndarray:
        """``integral_0^t exp(z(ln s)) ds``; zero for ``t <= 0``."""
        t = np.asarray(t, dtype=float)
        out = np.zeros(t.shape)
        k = self.node_times.size
        pos = t > 0
        if k == 0 or not np.any(pos):
            return out
        tp = t[pos]
        idx = self._locate(tp)
        val = np.empty(tp.shape)
        before = idx < 0
        after = idx >= k - 1
        mid = ~(before | after)
        val[before] = math.exp(self.z[0]) * tp[before]
        val[after] = self._cum[-1] + math.exp(self.z[-1]) * (tp[after] - self.node_times[-1])
        if np.any(mid):
            i = idx[mid]
            h, a = self._segments()
            L = np.log(tp[mid]) - self._log_t[i]
            val[mid] = self._cum[i] + self.node_times[i] * L * _exp_exprel(self.z[i], a[i] * L)
        out[pos] = val
        return out

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return np.where(t > 0, self.jump, 0.0) + self.smooth(t)

    def derivative(self, t) -> np.ndarray:
        """Time derivative of the smooth part, ``exp(z(ln t))``; zero for ``t <= 0``."""
        t = np.asarray(t, dtype=float)
        out = np.zeros(t.shape)
        k = self.node_times.size
        pos = t > 0
        if k == 0 or not np.any(pos):
            return out
        out[pos] = np.exp(np.interp(np.log(t[pos]), self._log_t, self.z))
        return out

    def z_gradient(self, t) -> np.ndarray:
        """Partial derivatives of the response w.r.t. every node value ``z_j``.

        Returns an array of shape ``t.shape + (k,)``.
        """
        t = np.asarray(t, dtype=float)
        k = self.node_times.size
        grad = np.zeros(t.shape + (k,))
        pos = t > 0
        if k == 0 or not np.any(pos):
            return grad
        tp = t[pos]
        idx = self._locate(tp)
        g = np.zeros(tp.shape + (k,))
        # cumulative integral gradients at each node
        dcum = np.zeros((k, k))
        dcum[0, 0] = math.exp(self.z[0]) * self.node_times[0]
        if k > 1:
            h, a = self._segments()
            ti = self.node_times[:-1]
            e_full = ti * h * _exp_exprel(self.z[:-1], a * h)
            g_full = ti * h * _exp_g(self.z[:-1], a * h)
            for i in range(k - 1):
                dcum[i + 1] = dcum[i]
                dcum[i + 1, i] += e_full[i] - g_full[i]
                dcum[i + 1, i + 1] += g_full[i]
        before = idx < 0
        after = idx >= k - 1
        mid = ~(before | after)
        if np.any(before):
            g[before, 0] = math.exp(self.z[0]) * tp[before]
        if np.any(after):
            g[after] = dcum[-1]
            g[after, -1] += math.exp(self.z[-1]) * (tp[after] - self.node_times[-1])
        if np.any(mid):
            i = idx[mid]
            L = np.log(tp[mid]) - self._log_t[i]
            ti = self.node_times[i]
            part_e = ti * L * _exp_exprel(self.z[i], a[i] * L)
            part_g = ti * L * L / h[i] * _exp_g(self.z[i], a[i] * L)
            rows = np.nonzero(mid)[0]
            g[rows] = dcum[i]
            g[rows, i] += part_e - part_g
            g[rows, i + 1] += part_g
        grad[pos] = g
        return grad

    def to_dict(self) -> dict:
        return {
            "jump": self.jump,
            "nodes": [[float(t), float(z)] for t, z in zip(self.node_times, self.z)],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Utr":
        nodes = d.get("nodes", [])
        return cls(float(d.get("jump", 0.0)), [n[0] for n in nodes], [n[1] for n in nodes])


ZERO_UTR = Utr()


def eval_utr(u: Utr, t) -> np.ndarray:
    """Response of ``u`` at ``t`` (bar per m3/day); zero for ``t <= 0``."""
    return u(t)


def log_node_grid(t_min: float, t_max: float, per_decade: int = 6) -> np.ndarray:
    """Log-spaced node times covering ``[t_min, t_max]``."""
    if not (t_max > 0 and t_min > 0):
        raise ModelError("node grid bounds must be positive")
    if t_max <= t_min:
        return np.array([t_min])
    decades = math.log10(t_max / t_min)
    n = max(2, int(math.ceil(decades * per_decade)) + 1)
    return np.logspace(math.log10(t_min), math.log10(t_max), n)


# ---------------------------------------------------------------------------
# CRM-form responses

SELF = "self"
PRODUCER_SOURCE = "producer"
INJECTOR_SOURCE = "injector"


def crm_utr(tau: float, gamma: float, source: str = SELF, f: float = 0.0,
            node_time: float = 1.0) -> Utr:
    """Response implied by a capacitance-resistance model.

    ``source="self"`` gives the drawdown response ``(tau/gamma) theta(t) + t/gamma``;
    an offset producer gives zero; an injector supporting the producer with
    fraction ``f`` gives ``(f/gamma) t``.
    """
    if not gamma > 0:
        raise ModelError(f"gamma must be > 0, got {gamma}")
    if tau < 0:
        raise ModelError(f"tau must be >= 0, got {tau}")
    if not 0.0 <= f <= 1.0:
        raise ModelError(f"connectivity must lie in [0, 1], got {f}")
    if source == SELF:
        return Utr(tau / gamma, [node_time], [math.log(1.0 / gamma)])
    if source == PRODUCER_SOURCE:
        return ZERO_UTR
    if source == INJECTOR_SOURCE:
        if f == 0.0:
            return ZERO_UTR
        return Utr(0.0, [node_time], [math.log(f / gamma)])
    raise ModelError(f"unknown source kind {source!r}")


# ---------------------------------------------------------------------------
# analytical homogeneous-reservoir responses

INFINITE = "infinite"
PSS_TANK = "pss_tank"


@dataclass(frozen=True)
class ReservoirParams:
    """Homogeneous reservoir lumped into two diffusion coefficients.

    transmissibility : k h / mu, m3/day/bar
    storativity : phi c_t h, m3/bar per m2
    well_radius : m
    skin : dimensionless
    boundary : ``"infinite"`` or ``"pss_tank"``
    pore_volume, compressibility : tank pore volume (m3) and c_t (1/bar),
        required for ``pss_tank``
    """

    transmissibility: float
    storativity: float
    well_radius: float = 0.1
    skin: float = 0.0
    boundary: str = INFINITE
    pore_volume: float | None = None
    compressibility: float | None = None

    def __post_init__(self):
        for name in ("transmissibility", "storativity", "well_radius"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ModelError(f"{name} must be > 0, got {value}")
        if not math.isfinite(self.skin):
            raise ModelError("skin must be finite")
        if self.boundary == PSS_TANK:
            if not (self.pore_volume and self.pore_volume > 0):
                raise ModelError("pss_tank needs a positive pore_volume")
            if not (self.compressibility and self.compressibility > 0):
                raise ModelError("pss_tank needs a positive compressibility")
        elif self.boundary != INFINITE:
            raise ModelError(f"unknown boundary {self.boundary!r}")

    @property
    def capacitance(self) -> float:
        """c_t * V_phi, m3/bar (tank only)."""
        return self.compressibility * self.pore_volume

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def exp1(x):
    """Exponential integral E1."""
    return special.exp1(x)


def line_source(rp: ReservoirParams, r: float, t) -> np.ndarray:
    """Infinite-acting line-source response per unit rate, bar/(m3/day)."""
    t = np.asarray(t, dtype=float)
    T, S = rp.transmissibility, rp.storativity
    out = np.zeros(t.shape)
    pos = t > 0
    u = r * r * S / (4.0 * T * t[pos])
    out[pos] = exp1(u) / (4.0 * math.pi * T)
    return out


def _line_source_derivative(rp: ReservoirParams, r: float, t):
    t = np.asarray(t, dtype=float)
    T, S = rp.transmissibility, rp.storativity
    c = r * r * S / (4.0 * T)
    with np.errstate(over="ignore", divide="ignore"):
        return np.exp(-c / t) / (4.0 * math.pi * T * t)


def pss_switch_time(rp: ReservoirParams, r: float) -> float:
    """Time where the line-source derivative falls to the tank slope."""
    T, S = rp.transmissibility, rp.storativity
    slope = 1.0 / rp.capacitance
    c = r * r * S / (4.0 * T)
    peak = max(c, 1e-300)

    def log_excess(t):
        return -c / t - math.log(4.0 * math.pi * T * t) - math.log(slope)

    if log_excess(peak) <= 0.0:
        return peak
    hi = max(peak * 2.0, rp.capacitance / (4.0 * math.pi * T) * 2.0)
    while log_excess(hi) > 0.0:
        hi *= 2.0
    return optimize.brentq(log_excess, peak, hi, xtol=1e-14 * hi, rtol=1e-15, maxiter=500)


def default_analytic_nodes() -> np.ndarray:
    return np.logspace(-3.0, 5.0, 8 * 10 + 1)


def analytic_utr(rp: ReservoirParams, distance: float, self_response: bool | None = None,
                 node_times=None) -> Utr:
    """Node-encoded response of a homogeneous reservoir.

    The infinite-acting response is the line source (skin added to the self
    response as a Heaviside term; negative skin enlarges the effective
    radius). With ``pss_tank`` the line source hands over, at the time its
    derivative drops to ``1/(c_t V_phi)``, to linear growth with that slope.
    The derivative is sampled at the nodes, so the returned response is
    exact up to the log-linear interpolation of ``z``.
    """
    if self_response is None:
        self_response = distance == rp.well_radius
    if not (math.isfinite(distance) and distance > 0):
        raise ModelError(f"distance must be > 0, got {distance}")
    if self_response and distance != rp.well_radius:
        raise ModelError("self response must be evaluated at the well radius")
    if not self_response and distance < rp.well_radius:
        raise ModelError("cross-well distance smaller than the well radius")
    nodes = default_analytic_nodes() if node_times is None else np.asarray(node_times, dtype=float)
    r = distance
    jump = 0.0
    if self_response:
        if rp.skin >= 0:
            jump = rp.skin / (2.0 * math.pi * rp.transmissibility)
        else:
            r = rp.well_radius * math.exp(-rp.skin)
    if rp.boundary == PSS_TANK:
        ts = pss_switch_time(rp, r)
        nodes = np.union1d(nodes, [ts])
        deriv = np.where(nodes < ts, _line_source_derivative(rp, r, nodes), 1.0 / rp.capacitance)
    else:
        deriv = _line_source_derivative(rp, r, nodes)
    with np.errstate(divide="ignore"):
        z = np.log(deriv)
    z = np.clip(z, Z_FLOOR, Z_CEIL)
    return Utr(jump, nodes, z)


# ---------------------------------------------------------------------------
# response matrix


@dataclass(frozen=True, eq=False)
class UtrMatrix:
    """Square table of responses over ``wells``; keys are ``(observer, source)``.

    Pairs absent from ``responses`` are inactive and respond identically zero.
    """

    wells: tuple[str, ...]
    responses: Mapping[tuple[str, str], Utr]

    def __post_init__(self):
        wells = tuple(self.wells)
        if len(set(wells)) != len(wells):
            raise ModelError("duplicate wells in response matrix")
        known = set(wells)
        for (n, m), u in self.responses.items():
            if n not in known or m not in known:
                raise ModelError(f"response pair ({n}, {m}) references unknown well")
            if not isinstance(u, Utr):
                raise ModelError(f"missing response for active pair ({n}, {m})")
        object.__setattr__(self, "wells", wells)
        object.__setattr__(self, "responses", dict(self.responses))

    def __eq__(self, other):
        if not isinstance(other, UtrMatrix):
            return NotImplemented
        return self.wells == other.wells and self.responses == other.responses

    __hash__ = None

    def get(self, observer: str, source: str) -> Utr:
        return self.responses.get((observer, source), ZERO_UTR)

    def active(self, observer: str, source: str) -> bool:
        return (observer, source) in self.responses

    def sources(self, observer: str) -> list[str]:
        return [m for m in self.wells if (observer, m) in self.responses]

    @property
    def observers(self) -> list[str]:
        return [n for n in self.wells if any((n, m) in self.responses for m in self.wells)]
