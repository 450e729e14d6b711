"""Synthetic multi-well scenarios with known ground truth.

Pressures come from the convolution engine driven by either closed-form
homogeneous-reservoir responses or a CRM model mapped to responses. The
emitted rates can carry multiplicative errors and the pressures Gaussian
noise; the true model is returned alongside for round-trip checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .bridge import crm_to_mdcv
from .convolution import DeconvolutionModel, simulate_pressure
from .crm import CrmModel
from .errors import DataError, ModelError
from .utr import ReservoirParams, UtrMatrix, analytic_utr
from .welldata import INJECTOR, PRODUCER, ROLES, PressureSeries, RateHistory, Scenario, Well

ANALYTIC = "analytic"
CRM = "crm"


@dataclass(frozen=True)
class WellSite:
    name: str
    role: str
    x: float = 0.0
    y: float = 0.0

    def __post_init__(self):
        if self.role not in ROLES:
            raise DataError(f"well {self.name!r}: unknown role {self.role!r}")


@dataclass(frozen=True)
class RateSchedule:
    """Random step schedule.

    Each step lasts ``step_days``. At every step a well changes its level
    with probability ``event_probability`` (only inside ``event_window``
    when given); the new level is drawn uniformly from the role's range, or
    is zero with probability ``shut_in_probability``. Injector levels are
    magnitudes and are emitted negative.
    """

    n_steps: int = 365
    step_days: float = 1.0
    event_probability: float = 0.05
    producer_range: tuple[float, float] = (50.0, 150.0)
    injector_range: tuple[float, float] = (80.0, 200.0)
    shut_in_probability: float = 0.0
    event_window: tuple[float, float] | None = None

    def __post_init__(self):
        if self.n_steps < 1 or not self.step_days > 0:
            raise DataError("schedule needs at least one step of positive length")
        if not 0 <= self.event_probability <= 1 or not 0 <= self.shut_in_probability <= 1:
            raise DataError("probabilities must lie in [0, 1]")
        for lo, hi in (self.producer_range, self.injector_range):
            if not 0 <= lo <= hi:
                raise DataError("rate ranges must satisfy 0 <= low <= high")

    def generate(self, role: str, rng: np.random.Generator) -> RateHistory:
        lo, hi = self.producer_range if role == PRODUCER else self.injector_range
        times = np.arange(self.n_steps) * self.step_days
        level = rng.uniform(lo, hi)
        rates = np.empty(self.n_steps)
        for k, t in enumerate(times):
            draw_event = rng.random()
            draw_shut = rng.random()
            draw_level = rng.uniform(lo, hi)
            in_window = self.event_window is None or self.event_window[0] <= t < self.event_window[1]
            if k > 0 and in_window and draw_event < self.event_probability:
                level = 0.0 if draw_shut < self.shut_in_probability else draw_level
            rates[k] = level
        sign = -1.0 if role == INJECTOR else 1.0
        return RateHistory(times, sign * rates)


@dataclass(frozen=True)
class SyntheticSpec:
    """Everything needed to generate one scenario.

    Attributes
    ----------
    wells : layout and roles
    reservoir : homogeneous reservoir for ``source="analytic"``
    source : ``"analytic"`` or ``"crm"``
    crm_model : ground truth for ``source="crm"``
    p0 : initial pressure of every well, bar
    schedule : random rate schedule, ignored for wells in ``rates``
    rates : explicit true rates per well
    pressure_noise_std : Gaussian noise added to pressures, bar
    sampling_dt : pressure sampling interval; samples at dt, 2 dt, ...
    rate_corruption_std : std of the mean-one log-normal rate factors
    gauged : wells with pressure data (default: producers for ``crm``,
        all wells for ``analytic``)
    p0_known : whether the scenario carries the initial pressures
    seed : fixes all randomness
    """

    wells: tuple[WellSite, ...]
    reservoir: ReservoirParams | None = None
    source: str = ANALYTIC
    crm_model: CrmModel | None = None
    p0: float = 250.0
    schedule: RateSchedule = field(default_factory=RateSchedule)
    rates: Mapping[str, RateHistory] = field(default_factory=dict)
    pressure_noise_std: float = 0.0
    sampling_dt: float = 1.0
    rate_corruption_std: float = 0.0
    gauged: tuple[str, ...] | None = None
    p0_known: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "wells", tuple(self.wells))
        object.__setattr__(self, "rates", dict(self.rates))
        names = [w.name for w in self.wells]
        if len(set(names)) != len(names):
            raise DataError("duplicate well names in synthetic layout")
        if self.source not in (ANALYTIC, CRM):
            raise DataError(f"unknown ground-truth source {self.source!r}")
        if self.source == ANALYTIC and self.reservoir is None:
            raise DataError("analytic source needs reservoir parameters")
        if self.source == CRM:
            if self.crm_model is None:
                raise DataError("crm source needs a CRM model")
            roles = {w.name: w.role for w in self.wells}
            for n in self.crm_model.producers:
                if roles.get(n) != PRODUCER:
                    raise DataError(f"CRM producer {n!r} is not a producer of the layout")
            for n in self.crm_model.injectors:
                if roles.get(n) != INJECTOR:
                    raise DataError(f"CRM injector {n!r} is not an injector of the layout")
        if self.pressure_noise_std < 0 or self.rate_corruption_std < 0:
            raise DataError("noise levels must be >= 0")
        if not self.sampling_dt > 0:
            raise DataError("sampling_dt must be > 0")
        if self.gauged is not None:
            object.__setattr__(self, "gauged", tuple(self.gauged))
            for n in self.gauged:
                if n not in names:
                    raise DataError(f"gauged well {n!r} not in layout")

    @property
    def names(self) -> list[str]:
        return [w.name for w in self.wells]


def _check_layout(spec: SyntheticSpec) -> None:
    radius = spec.reservoir.well_radius if spec.reservoir is not None else 0.0
    for i, a in enumerate(spec.wells):
        for b in spec.wells[i + 1:]:
            d = math.hypot(a.x - b.x, a.y - b.y)
            if d <= radius or d == 0.0:
                raise DataError(f"wells {a.name!r} and {b.name!r} overlap")


def analytic_model(spec: SyntheticSpec) -> DeconvolutionModel:
    """Line-source (or tank) responses between every pair of wells."""
    _check_layout(spec)
    rp = spec.reservoir
    responses = {}
    for a in spec.wells:
        for b in spec.wells:
            if a.name == b.name:
                responses[(a.name, b.name)] = analytic_utr(rp, rp.well_radius, self_response=True)
            else:
                d = math.hypot(a.x - b.x, a.y - b.y)
                responses[(a.name, b.name)] = analytic_utr(rp, d, self_response=False)
    names = tuple(spec.names)
    return DeconvolutionModel({n: spec.p0 for n in names}, UtrMatrix(names, responses))


def lognormal_factors(rng: np.random.Generator, size: int, std: float) -> np.ndarray:
    """Positive factors with mean 1 and standard deviation ``std``."""
    if std == 0:
        return np.ones(size)
    s2 = math.log1p(std * std)
    return rng.lognormal(-0.5 * s2, math.sqrt(s2), size)


def generate_scenario(spec: SyntheticSpec) -> tuple[Scenario, DeconvolutionModel | CrmModel, dict[str, RateHistory]]:
    """Scenario, ground-truth model and the true (uncorrupted) rates."""
    rng = np.random.default_rng(spec.seed)
    if spec.source == ANALYTIC:
        truth: DeconvolutionModel | CrmModel = analytic_model(spec)
        conv = truth
    else:
        _check_layout(spec)
        truth = spec.crm_model
        conv = crm_to_mdcv(truth, {n: spec.p0 for n in truth.producers})

    true_rates = {}
    for w in spec.wells:
        true_rates[w.name] = spec.rates.get(w.name) or spec.schedule.generate(w.role, rng)

    end = max([spec.schedule.n_steps * spec.schedule.step_days] +
              [float(rh.times[-1]) + spec.schedule.step_days for rh in true_rates.values() if len(rh)])
    n_samples = int(math.floor(end / spec.sampling_dt + 1e-9))
    sample_t = spec.sampling_dt * np.arange(1, n_samples + 1)
    if spec.gauged is not None:
        gauged = list(spec.gauged)
    elif spec.source == CRM:
        gauged = list(truth.producers)
    else:
        gauged = spec.names
    missing = [n for n in gauged if n not in conv.p0]
    if missing:
        raise DataError(f"gauged wells without modelled pressure: {missing}")
    sim = simulate_pressure(conv, true_rates, {n: sample_t for n in gauged})
    pressures = {}
    for n in gauged:
        p = sim[n].pressures
        if spec.pressure_noise_std > 0:
            p = p + rng.normal(0.0, spec.pressure_noise_std, p.size)
        pressures[n] = PressureSeries(sample_t, p)

    emitted = {}
    for n in spec.names:
        rh = true_rates[n]
        factors = lognormal_factors(rng, len(rh), spec.rate_corruption_std)
        emitted[n] = RateHistory(rh.times, rh.rates * factors)

    wells = tuple(Well(w.name, w.role) for w in spec.wells)
    p0 = {n: spec.p0 for n in gauged} if spec.p0_known else {}
    return Scenario(wells, emitted, pressures, p0), truth, true_rates


def spec_from_dict(d: Mapping) -> SyntheticSpec:
    """Build a spec from a parsed TOML document."""
    try:
        wells = tuple(WellSite(w["name"], w["role"], float(w.get("x", 0.0)), float(w.get("y", 0.0)))
                      for w in d["wells"])
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed well layout: {exc}") from exc
    reservoir = None
    if "reservoir" in d:
        reservoir = ReservoirParams(**d["reservoir"])
    crm_model = CrmModel.from_dict(d["crm"]) if "crm" in d else None
    sched = dict(d.get("schedule", {}))
    for key in ("producer_range", "injector_range", "event_window"):
        if key in sched:
            sched[key] = tuple(sched[key])
    try:
        return SyntheticSpec(
            wells=wells,
            reservoir=reservoir,
            source=d.get("source", ANALYTIC if crm_model is None else CRM),
            crm_model=crm_model,
            p0=float(d.get("p0_bar", 250.0)),
            schedule=RateSchedule(**sched),
            pressure_noise_std=float(d.get("pressure_noise_std", 0.0)),
            sampling_dt=float(d.get("sampling_dt", 1.0)),
            rate_corruption_std=float(d.get("rate_corruption_std", 0.0)),
            gauged=tuple(d["gauged"]) if "gauged" in d else None,
            p0_known=bool(d.get("p0_known", False)),
            seed=int(d.get("seed", 0)),
        )
    except (TypeError, ModelError) as exc:
        raise DataError(f"malformed synthetic spec: {exc}") from exc
