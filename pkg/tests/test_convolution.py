import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import stieltjes_oracle
from multiwell.convolution import (
    CorrectionTable,
    DeconvolutionModel,
    simulate_pressure,
    simulate_pressure_derivative_form,
    simulate_rates,
)
from multiwell.errors import DataError, ModelError, PressureControlInfeasible
from multiwell.utr import Utr, UtrMatrix, crm_utr
from multiwell.welldata import PressureSeries, RateHistory

DTR = crm_utr(5.0, 25.0)  # 0.2 theta + 0.04 t


def single_well(p0=200.0, u=DTR):
    return DeconvolutionModel({"P": p0}, UtrMatrix(("P",), {("P", "P"): u}))


def test_zero_rates_give_initial_pressure():
    m = single_well()
    out = simulate_pressure(m, {"P": RateHistory([0.0], [0.0])}, [1.0, 5.0])
    assert np.all(out["P"].pressures == 200.0)
    out = simulate_pressure_derivative_form(m, {"P": RateHistory.empty()}, [1.0, 5.0])
    assert np.all(out["P"].pressures == 200.0)


def test_single_producer_example():
    # [DERIVED] 200 - 100 * (0.2 + 0.04 * 10)
    m = single_well()
    rh = RateHistory([0.0], [100.0])
    p = simulate_pressure(m, {"P": rh}, [10.0])["P"].pressures[0]
    assert p == pytest.approx(140.0, abs=1e-12)
    assert 200.0 - stieltjes_oracle(DTR, rh, 10.0) == pytest.approx(140.0, rel=1e-8)


def test_injector_support_example():
    utrs = UtrMatrix(("P", "I"), {("P", "P"): DTR, ("P", "I"): crm_utr(5.0, 25.0, "injector", f=0.5)})
    m = DeconvolutionModel({"P": 200.0}, utrs)
    rates = {"P": RateHistory([0.0], [100.0]), "I": RateHistory([0.0], [-80.0])}
    p = simulate_pressure(m, rates, [10.0])["P"].pressures[0]
    assert p == pytest.approx(156.0, abs=1e-12)
    oracle = 200.0 - stieltjes_oracle(DTR, rates["P"], 10.0) - stieltjes_oracle(utrs.get("P", "I"), rates["I"], 10.0)
    assert oracle == pytest.approx(156.0, rel=1e-8)


def test_derivative_form_single_step():
    # [DERIVED] jump q + slope t q
    p = simulate_pressure_derivative_form(single_well(), {"P": RateHistory([0.0], [50.0])}, [4.0])
    assert p["P"].pressures[0] == pytest.approx(200.0 - 50.0 * 0.2 - 50.0 * 0.04 * 4.0, abs=1e-12)


rate_lists = st.lists(st.floats(-200.0, 200.0), min_size=1, max_size=12)
z_lists = st.lists(st.floats(-7.0, -1.0), min_size=2, max_size=6)


def random_utr(jump, z):
    return Utr(jump, np.logspace(-1, 2, len(z)), z)


@given(st.floats(0.0, 0.5), z_lists, rate_lists, st.floats(0.3, 30.0))
def test_superposition_matches_stieltjes_quadrature(jump, z, rates, t):
    u = random_utr(jump, z)
    rh = RateHistory(np.arange(len(rates)) * 1.7, rates)
    drawdown = 200.0 - simulate_pressure(single_well(u=u), {"P": rh}, [t])["P"].pressures[0]
    oracle = stieltjes_oracle(u, rh, t)
    scale = max(abs(oracle), max(abs(r) for r in rates) * (jump + u(t)) * 1e-3, 1e-12)
    assert abs(drawdown - oracle) <= 1e-6 * scale


@given(st.floats(0.0, 0.5), z_lists, rate_lists)
def test_two_forms_agree(jump, z, rates):
    u = random_utr(jump, z)
    m = single_well(u=u)
    rh = {"P": RateHistory(np.arange(len(rates)) * 1.3, rates)}
    t = np.linspace(0.05, 25.0, 60)
    a = simulate_pressure(m, rh, t)["P"].pressures
    b = simulate_pressure_derivative_form(m, rh, t)["P"].pressures
    scale = max(float(np.max(np.abs(200.0 - a))), 1e-12)
    assert np.max(np.abs(a - b)) <= 1e-9 * max(scale, 200.0)


@given(z_lists, rate_lists, st.floats(0.1, 5.0))
def test_linearity(z, rates, c):
    m = single_well(u=random_utr(0.1, z))
    rh = RateHistory(np.arange(len(rates), dtype=float), rates)
    t = np.linspace(0.5, 20.0, 15)
    d1 = 200.0 - simulate_pressure(m, {"P": rh}, t)["P"].pressures
    dc = 200.0 - simulate_pressure(m, {"P": rh.scaled(c)}, t)["P"].pressures
    assert np.allclose(dc, c * d1, rtol=1e-10, atol=1e-10)


@given(z_lists, rate_lists, rate_lists)
def test_superposition_of_histories(z, r1, r2):
    m = single_well(u=random_utr(0.1, z))
    n = min(len(r1), len(r2))
    times = np.arange(n, dtype=float)
    a, b = RateHistory(times, r1[:n]), RateHistory(times, r2[:n])
    both = RateHistory(times, np.add(r1[:n], r2[:n]))
    t = np.linspace(0.5, 15.0, 10)
    da = 200.0 - simulate_pressure(m, {"P": a}, t)["P"].pressures
    db = 200.0 - simulate_pressure(m, {"P": b}, t)["P"].pressures
    dab = 200.0 - simulate_pressure(m, {"P": both}, t)["P"].pressures
    assert np.allclose(dab, da + db, rtol=1e-10, atol=1e-9)


@given(z_lists, rate_lists, st.floats(0.0, 10.0))
def test_time_shift(z, rates, delay):
    m = single_well(u=random_utr(0.1, z))
    rh = RateHistory(np.arange(len(rates), dtype=float), rates)
    t = np.linspace(0.5, 15.0, 10)
    d = simulate_pressure(m, {"P": rh}, t)["P"].pressures
    ds = simulate_pressure(m, {"P": rh.shifted(delay)}, t + delay)["P"].pressures
    assert np.allclose(d, ds, rtol=1e-10, atol=1e-9)


def test_negative_query_time_rejected():
    with pytest.raises(DataError):
        simulate_pressure(single_well(), {"P": RateHistory([0.0], [1.0])}, [-1.0, 1.0])


def test_pressure_control_first_step():
    # [DERIVED] 1x1 solve: (200 - 190) / (0.2 + 0.04)
    out = simulate_rates(single_well(), {"P": PressureSeries([1.0], [190.0])})
    assert out["P"].rates[0] == pytest.approx(10.0 / 0.24, rel=1e-12)
    assert out["P"].rates[0] == pytest.approx(41.667, abs=1e-3)


def test_pressure_control_round_trip(rng):
    utrs = UtrMatrix(("P1", "P2", "I"), {
        ("P1", "P1"): crm_utr(4.0, 40.0), ("P2", "P2"): crm_utr(9.0, 90.0),
        ("P1", "P2"): random_utr(0.0, [-7.0, -6.0, -5.5]), ("P2", "P1"): random_utr(0.0, [-7.5, -6.0, -6.0]),
        ("P1", "I"): crm_utr(4.0, 40.0, "injector", f=0.4), ("P2", "I"): crm_utr(9.0, 90.0, "injector", f=0.5),
    })
    m = DeconvolutionModel({"P1": 250.0, "P2": 240.0}, utrs)
    t = np.arange(60, dtype=float)
    rates = {"P1": RateHistory(t, rng.uniform(20, 100, 60)), "P2": RateHistory(t, rng.uniform(20, 100, 60)),
             "I": RateHistory(t, -rng.uniform(50, 150, 60))}
    grid = t + 1.0
    p = simulate_pressure(m, rates, grid)
    back = simulate_rates(m, {"P1": p["P1"], "P2": p["P2"]}, {"I": rates["I"]})
    for n in ("P1", "P2"):
        assert np.allclose(back[n].times, t)
        assert np.max(np.abs(back[n].rates / rates[n].rates - 1)) < 1e-6


def test_pressure_control_infeasible_for_zero_response():
    m = single_well(u=Utr(0.0, [], []))
    with pytest.raises(PressureControlInfeasible):
        simulate_rates(m, {"P": PressureSeries([1.0, 2.0], [190.0, 185.0])})


def test_correction_factors_apply_by_step():
    table = CorrectionTable([0.0, 1.0], [1.2, 1.0])
    rh = RateHistory([0.0, 1.0, 2.0], [100.0, 50.0, 10.0])
    assert list(table.apply(rh).rates) == [120.0, 50.0, 10.0]
    m = DeconvolutionModel({"P": 200.0}, UtrMatrix(("P",), {("P", "P"): DTR}), {"P": table})
    p = simulate_pressure(m, {"P": RateHistory([0.0], [100.0])}, [10.0])["P"].pressures[0]
    assert p == pytest.approx(200.0 - 120.0 * 0.6)


def test_corrections_outside_band_rejected():
    with pytest.raises(ModelError):
        DeconvolutionModel({"P": 200.0}, UtrMatrix(("P",), {("P", "P"): DTR}),
                           {"P": CorrectionTable([0.0], [1.5])})


def test_model_json_round_trip():
    utrs = UtrMatrix(("P", "I"), {("P", "P"): DTR, ("P", "I"): random_utr(0.0, [-5.0, -4.0])})
    m = DeconvolutionModel({"P": 200.0}, utrs, {"P": CorrectionTable([0.0, 3.0], [0.9, 1.1])})
    assert DeconvolutionModel.from_dict(m.to_dict()) == m
    with pytest.raises(DataError):
        DeconvolutionModel.from_dict({"p0_bar": {}})


def test_step_at_query_time_uses_left_limit():
    # theta(0) = 0: a step at the query instant has not acted yet
    rh = RateHistory([0.0, 5.0], [100.0, 0.0])
    p = simulate_pressure(single_well(), {"P": rh}, [5.0])["P"].pressures[0]
    assert p == pytest.approx(200.0 - 100.0 * (0.2 + 0.04 * 5.0), abs=1e-12)
