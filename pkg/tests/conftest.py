import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from multiwell.crm import CrmModel, crm_simulate_pressure
from multiwell.welldata import INJECTOR, PRODUCER, RateHistory, Scenario, Well

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def step_schedule(rng, n_steps, lo, hi, p_event=0.08, sign=1.0):
    """Random piecewise-constant daily rates."""
    q = np.empty(n_steps)
    level = rng.uniform(lo, hi)
    for k in range(n_steps):
        if k and rng.random() < p_event:
            level = rng.uniform(lo, hi)
        q[k] = level
    return RateHistory(np.arange(n_steps, dtype=float), sign * q)


def random_crm(rng, n_p=3, n_i=2):
    f = rng.uniform(0.05, 1.0, (n_p, n_i))
    f = f / f.sum(axis=0) * rng.uniform(0.5, 1.0, n_i)
    producers = tuple(f"P{i + 1}" for i in range(n_p))
    injectors = tuple(f"I{i + 1}" for i in range(n_i))
    return CrmModel(producers, injectors, rng.uniform(1.0, 40.0, n_p), rng.uniform(20.0, 300.0, n_p), f)


def crm_scenario(model, rng, n_steps=365, p0=250.0, p0_known=True, p_event=0.08):
    """Noise-free producer pressures from the integrated CRM balance."""
    rates = {n: step_schedule(rng, n_steps, 20.0, 150.0, p_event) for n in model.producers}
    rates.update({n: step_schedule(rng, n_steps, 50.0, 200.0, p_event, sign=-1.0) for n in model.injectors})
    t = np.arange(1, n_steps + 1, dtype=float)
    ps = crm_simulate_pressure(model, {n: rates[n] for n in model.producers},
                               {n: rates[n] for n in model.injectors}, {n: p0 for n in model.producers}, t)
    wells = tuple(Well(n, PRODUCER) for n in model.producers) + tuple(Well(n, INJECTOR) for n in model.injectors)
    return Scenario(wells, rates, ps, {n: p0 for n in model.producers} if p0_known else {})


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion(request):
    """Record a one-line verdict for an acceptance criterion.

    Usage: ``record = criterion(3, "CRM fit round trip")`` then
    ``record(detail)`` once all assertions of the test passed. A test that
    fails before calling ``record`` is reported as FAIL.
    """
    state = {}

    def start(number: int, title: str):
        state.update(number=number, title=title, detail="")

        def record(detail: str = ""):
            state["detail"] = detail
            state["passed"] = True

        return record

    yield start
    if state:
        verdict = "PASS" if state.get("passed") else "FAIL"
        line = f"criterion {state['number']}: {verdict}  {state['title']}"
        if state["detail"]:
            line += f"  [{state['detail']}]"
        CRITERIA[state["number"]] = line


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
