"""CRM as a special case of multiwell convolution.

A CRM producer has own response ``(tau/gamma) theta(t) + t/gamma``, no
response to offset producers, and ``(f/gamma) t`` to an injector. Feeding
these into the convolution engine must reproduce the integrated CRM
pressure balance to round-off.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .convolution import DeconvolutionModel, simulate_pressure
from .crm import CrmModel, crm_simulate_pressure
from .errors import ModelError
from .utr import INJECTOR_SOURCE, SELF, UtrMatrix, crm_utr
from .welldata import Scenario

DEFAULT_TOLERANCE = 1e-9


def crm_to_mdcv(m: CrmModel, p0: Mapping[str, float | None], *, node_time: float = 1.0) -> DeconvolutionModel:
    """Convolution model equivalent to ``m``.

    Producers get the CRM own response and injector responses; injectors
    are sources only, with no modelled pressure. With producer interference
    the offset-producer fractions map to ``(g/gamma) t`` responses.
    """
    responses = {}
    for i, n in enumerate(m.producers):
        tau, gamma = float(m.tau[i]), float(m.gamma[i])
        if gamma <= 0:
            raise ModelError(f"gamma of {n!r} must be > 0")
        responses[(n, n)] = crm_utr(tau, gamma, SELF, node_time=node_time)
        for src, f in m.sources(n):
            if f > 0:
                responses[(n, src)] = crm_utr(tau, gamma, INJECTOR_SOURCE, f=f, node_time=node_time)
    wells = tuple(m.producers) + tuple(m.injectors)
    p0_model = {}
    for n in m.producers:
        value = p0.get(n)
        if value is None:
            raise ModelError(f"initial pressure of producer {n!r} is required")
        p0_model[n] = float(value)
    return DeconvolutionModel(p0_model, UtrMatrix(wells, responses))


@dataclass(frozen=True)
class EquivalenceReport:
    """Deviation between the convolution path and the CRM pressure balance.

    ``max_relative_deviation`` is the largest absolute pressure difference
    divided by the largest absolute CRM pressure.
    """

    max_relative_deviation: float
    tolerance: float
    passed: bool
    per_well: Mapping[str, tuple[float, ...]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "max_relative_deviation": self.max_relative_deviation,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "per_well": {k: list(v) for k, v in self.per_well.items()},
        }


def equivalence_check(m: CrmModel, s: Scenario, tol: float = DEFAULT_TOLERANCE,
                      p0: Mapping[str, float] | None = None, *, model: DeconvolutionModel | None = None) -> EquivalenceReport:
    """Compare convolution pressures with the CRM balance at every pressure sample.

    ``p0`` defaults to the scenario's initial pressures. ``model`` replaces
    the converted CRM model on the convolution side, which lets callers
    probe how sensitive the comparison is to response perturbations.
    """
    p0 = dict(s.p0 if p0 is None else p0)
    conv_model = model if model is not None else crm_to_mdcv(m, p0)
    times = {n: s.pressures[n].times for n in m.producers if len(s.pressures[n])}
    conv = simulate_pressure(conv_model, {n: s.rates[n] for n in s.names}, times)
    production = {n: s.rates[n] for n in s.producers}
    injections = {n: s.rates[n] for n in s.injectors}
    ref = crm_simulate_pressure(m, production, injections, {n: p0[n] for n in m.producers}, times)
    per_well = {}
    worst = 0.0
    scale = 0.0
    for n in times:
        diff = np.abs(conv[n].pressures - ref[n].pressures)
        per_well[n] = tuple(float(v) for v in diff)
        if diff.size:
            worst = max(worst, float(np.max(diff)))
            scale = max(scale, float(np.max(np.abs(ref[n].pressures))))
    rel = worst / scale if scale > 0 else worst
    return EquivalenceReport(rel, tol, bool(rel <= tol), per_well)
