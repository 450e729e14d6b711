import numpy as np
import pytest

from conftest import crm_scenario, random_crm, step_schedule
from multiwell.bridge import crm_to_mdcv
from multiwell.convolution import CorrectionTable, DeconvolutionModel, simulate_pressure
from multiwell.crm import CrmModel, crm_simulate_pressure
from multiwell.errors import DataError, FitError
from multiwell.mdcv import (
    MdcvOptions,
    MdcvProblem,
    correct_rates,
    deconvolve,
    jacobian_check,
    objective_value,
    predict,
)
from multiwell.utr import Utr, UtrMatrix, crm_utr
from multiwell.welldata import CumulativeRecord, PressureSeries, RateHistory, Scenario, Well

DTR = crm_utr(5.0, 25.0)
NO_PENALTY = MdcvOptions(lambda_curvature=0.0, rate_weight=0.0)


def tank_case():
    m = DeconvolutionModel({"P": 200.0}, UtrMatrix(("P",), {("P", "P"): DTR}))
    rh = RateHistory([0.0, 4.0, 9.0], [100.0, 60.0, 80.0])
    t = np.arange(1.0, 15.0)
    p = simulate_pressure(m, {"P": rh}, t)["P"]
    return m, Scenario((Well("P", "producer"),), {"P": rh}, {"P": p}, {"P": 200.0})


def test_objective_zero_for_exact_model():
    m, s = tank_case()
    assert objective_value(m, s, NO_PENALTY) == pytest.approx(0.0, abs=1e-20)


def test_objective_single_pressure_residual():
    m, s = tank_case()
    p = s.pressures["P"].pressures.copy()
    p[3] += 2.0
    assert objective_value(m, s.with_pressures({"P": PressureSeries(s.pressures["P"].times, p)}),
                           NO_PENALTY) == pytest.approx(4.0, rel=1e-12)


def test_objective_curvature_term():
    # z second difference of exactly 1 at the middle node
    u = Utr(0.2, [1.0, 10.0, 100.0], [-3.0, -3.0, -2.0])
    m = DeconvolutionModel({"P": 200.0}, UtrMatrix(("P",), {("P", "P"): u}))
    _, s = tank_case()
    base = objective_value(m, s, NO_PENALTY)
    with_curv = objective_value(m, s, MdcvOptions(lambda_curvature=0.1, rate_weight=0.0))
    assert with_curv - base == pytest.approx(0.1, rel=1e-9)


def test_objective_rate_correction_term():
    m, s = tank_case()
    corrected = DeconvolutionModel(m.p0, m.utrs, {"P": CorrectionTable([0.0], [1.1])})
    # corrected minus recorded: 10 m3/d on the first step, weight 1e-4
    full = objective_value(corrected, s, MdcvOptions(lambda_curvature=0.0))
    pressure_only = objective_value(corrected, s, NO_PENALTY)
    assert full - pressure_only == pytest.approx(1e-4 * 100.0, rel=1e-12)


def jacobian_case(rng):
    t = np.arange(60.0)
    rates = {"P": step_schedule(rng, 60, 30, 120, 0.2), "I": step_schedule(rng, 60, 50, 150, 0.2, -1.0),
             "Q": step_schedule(rng, 60, 30, 120, 0.2)}
    ps = {n: PressureSeries(t[1:] + 0.5, 250 - rng.uniform(0, 30, 59)) for n in ("P", "Q")}
    wells = (Well("P", "producer"), Well("I", "injector"), Well("Q", "producer"))
    cum = (CumulativeRecord(0.0, 30.0, 2500.0, ("P", "Q")), CumulativeRecord(30.0, 59.0, 3000.0, ("I",)))
    s = Scenario(wells, rates, ps, {"Q": 250.0}, cum)
    opt = MdcvOptions(fit_rate_corrections=True, lambda_cumulative=0.3, nodes_per_decade=3)
    return MdcvProblem(s, opt)


def test_jacobian_matches_finite_differences(rng):
    problem = jacobian_case(rng)
    lo, hi = problem.lower, problem.upper
    for _ in range(10):
        x = np.empty(problem.n_params)
        for i, label in enumerate(problem.labels):
            if label.startswith("p0"):
                x[i] = rng.uniform(240, 270)
            elif label.startswith("jump"):
                x[i] = rng.uniform(0.01, 0.5)
            elif label.startswith("z"):
                x[i] = rng.uniform(-7.0, -2.0)
            else:
                x[i] = rng.uniform(lo[i] + 0.01, hi[i] - 0.01)
        assert jacobian_check(problem, x) < 1e-4


def test_crm_models_are_exactly_representable(rng):
    for activity in ("crm", "all"):
        truth = random_crm(rng)
        s = crm_scenario(truth, rng)
        model = crm_to_mdcv(truth, s.p0)
        problem = MdcvProblem(s, MdcvOptions(activity=activity))
        x = problem.encode(model)
        assert problem.objective(x) < 1e-12


def crm_truth_scenario(rng, p0_known):
    truth = CrmModel(("P1", "P2"), ("I1",), [8.0, 20.0], [60.0, 120.0], [[0.5], [0.4]])
    return truth, crm_scenario(truth, rng, p0_known=p0_known)


def test_round_trip_crm_truth_free_p0(rng):
    truth, s = crm_truth_scenario(rng, p0_known=False)
    model, report = deconvolve(s, MdcvOptions(activity="crm"))
    assert report.status == "converged"
    ref = crm_to_mdcv(truth, {n: 250.0 for n in truth.producers})
    t = np.logspace(-1, 2, 13)
    for n in truth.producers:
        assert abs(model.p0[n] - 250.0) < 0.5
        assert np.max(np.abs(model.utrs.get(n, n)(t) / ref.utrs.get(n, n)(t) - 1)) < 0.05
        assert np.max(np.abs(model.utrs.get(n, "I1")(t) / ref.utrs.get(n, "I1")(t) - 1)) < 0.05


def test_objective_trace_never_increases(rng):
    _, s = crm_truth_scenario(rng, p0_known=True)
    _, report = deconvolve(s, MdcvOptions(activity="crm", gn_iterations=30))
    trace = np.array(report.objective_trace)
    assert trace.size > 1
    assert np.all(np.diff(trace) <= 0)


def test_same_seed_same_report(rng):
    _, s = crm_truth_scenario(rng, p0_known=True)
    opt = MdcvOptions(activity="crm", gn_iterations=20, seed=7)
    m1, r1 = deconvolve(s, opt)
    m2, r2 = deconvolve(s, opt)
    assert m1 == m2
    assert r1.to_dict() == r2.to_dict()


def test_constant_rates_give_no_model():
    t = np.arange(1.0, 40.0)
    s = Scenario((Well("P", "producer"),), {"P": RateHistory([0.0], [100.0])},
                 {"P": PressureSeries(t, 200 - 0.1 * t)})
    model, report = deconvolve(s)
    assert model is None and report.status == "no_variation"


def test_empty_pressures_and_zero_budget_rejected():
    _, s = tank_case()
    with pytest.raises(DataError):
        deconvolve(s.with_pressures({}))
    with pytest.raises(FitError):
        deconvolve(s, MdcvOptions(gn_iterations=0, de_generations=0))


def test_duplicate_injectors_flag_ill_posed(rng):
    # two injectors with identical rate histories cannot be told apart
    inj = step_schedule(rng, 200, 50, 200, 0.1, -1.0)
    rates = {"P": step_schedule(rng, 200, 20, 150, 0.1), "I1": inj, "I2": inj}
    truth = CrmModel(("P",), ("I1", "I2"), [5.0], [50.0], [[0.3], [0.3]])
    t = np.arange(1.0, 201.0)
    p = crm_simulate_pressure(truth, {"P": rates["P"]}, {"I1": inj, "I2": inj}, {"P": 250.0}, t)
    s = Scenario((Well("P", "producer"), Well("I1", "injector"), Well("I2", "injector")), rates, p,
                 {"P": 250.0})
    _, report = deconvolve(s, MdcvOptions(activity="crm", lambda_curvature=0.0))
    assert report.status == "ill_posed"
    labels = set().union(*(d["parameters"] for d in report.diagnostics["near_null_directions"]))
    assert any("I1" in k for k in labels) and any("I2" in k for k in labels)


def test_correct_rates_identity_and_factor():
    m, s = tank_case()
    assert correct_rates(m, s) == s.rates
    corrected = DeconvolutionModel(m.p0, m.utrs, {"P": CorrectionTable([0.0], [1.2])})
    assert correct_rates(corrected, s)["P"].rates[0] == pytest.approx(120.0)
    assert correct_rates(corrected, s)["P"].rates[1] == 60.0


def test_predict_tank_shut_in_plateau():
    # [DERIVED] after shut-in the linear DTR leaves p0 - Q / gamma
    m = DeconvolutionModel({"P": 200.0}, UtrMatrix(("P",), {("P", "P"): DTR}))
    hist = Scenario((Well("P", "producer"),), {"P": RateHistory([0.0], [100.0])},
                    {"P": PressureSeries([5.0], [200.0 - 100 * (0.2 + 0.04 * 5)])})
    out = predict(m, hist, rates={"P": RateHistory([10.0], [0.0])}, times=[20.0, 50.0, 500.0])
    assert np.allclose(out["P"].pressures, 200.0 - 1000.0 / 25.0, rtol=1e-13)


def test_predict_training_controls_reproduce_fit(rng):
    _, s = crm_truth_scenario(rng, p0_known=True)
    model, report = deconvolve(s, MdcvOptions(activity="crm", gn_iterations=20))
    out = predict(model, s, times={n: s.pressures[n].times for n in ("P1", "P2")})
    for n in ("P1", "P2"):
        fitted = s.pressures[n].pressures + np.array(report.residuals[n])
        assert np.allclose(out[n].pressures, fitted, rtol=1e-12, atol=1e-9)


def test_predict_rate_then_pressure_control_round_trip(rng):
    truth = random_crm(rng, 2, 1)
    s = crm_scenario(truth, rng, n_steps=100)
    model = crm_to_mdcv(truth, s.p0)
    t_future = np.arange(100.0, 130.0)
    future = {n: RateHistory(t_future, rng.uniform(20, 150, 30)) for n in truth.producers}
    future["I1"] = RateHistory(t_future, -rng.uniform(50, 200, 30))
    grid = t_future + 1.0
    p = predict(model, s, rates=future, times={n: grid for n in truth.producers})
    back = predict(model, s, rates={"I1": future["I1"]},
                   pressure_targets={n: p[n] for n in truth.producers}, start=100.0)
    for n in truth.producers:
        new = back[n].times >= 100.0
        assert np.allclose(back[n].times[new], t_future)
        assert np.max(np.abs(back[n].rates[new] / future[n].rates - 1)) < 1e-6
