"""Acceptance suite: one test per criterion, tolerances pinned.

Each test prints a PASS/FAIL line in the "acceptance criteria" section of
the pytest summary.
"""

import json
import time

import numpy as np

from conftest import crm_scenario, random_crm, step_schedule
from oracles import ode_rates, stieltjes_oracle
from multiwell.bridge import crm_to_mdcv, equivalence_check
from multiwell.cli import run
from multiwell.convolution import simulate_pressure, simulate_pressure_derivative_form
from multiwell.crm import CrmModel, crm_fit, crm_simulate_rates
from multiwell.mdcv import MdcvOptions, MdcvProblem, correct_rates, deconvolve, jacobian_check
from multiwell.synthetic import RateSchedule, SyntheticSpec, WellSite, generate_scenario
from multiwell.utr import ReservoirParams, Utr
from multiwell.validation import NO_VALIDATION, cross_validate
from multiwell.welldata import (
    CumulativeRecord,
    INJECTOR,
    PRODUCER,
    PressureSeries,
    RateHistory,
    Scenario,
    SplitSpec,
    Well,
    write_scenario,
)

# pinned tolerances
BRIDGE_TOL = 1e-9
FORMS_TOL = 1e-9
CRM_REL_TOL = 0.01
CRM_F_TOL = 0.02
DTR_REL_TOL = 0.05
P0_TOL_BAR = 0.5
MDCV_R2_MIN = 0.98
CORRECTION_RATIO_MAX = 0.5
JACOBIAN_TOL = 1e-4
QUADRATURE_TOL = 1e-6
ODE_TOL = 1e-8

LAYOUT = (WellSite("P1", PRODUCER, 0, 0), WellSite("P2", PRODUCER, 600, 0), WellSite("I1", INJECTOR, 300, 400))


def rates_only_scenario(model: CrmModel, rng, n_steps=365) -> Scenario:
    """Random step rates; pressure samples only fix the comparison times."""
    rates = {n: step_schedule(rng, n_steps, 20.0, 150.0) for n in model.producers}
    rates.update({n: step_schedule(rng, n_steps, 50.0, 200.0, sign=-1.0) for n in model.injectors})
    t = np.arange(1, n_steps + 1, dtype=float)
    ps = {n: PressureSeries(t, np.zeros(t.size)) for n in model.producers}
    wells = tuple(Well(n, PRODUCER) for n in model.producers) + tuple(Well(n, INJECTOR) for n in model.injectors)
    return Scenario(wells, rates, ps, {n: 250.0 for n in model.producers})


def test_criterion_1_bridge_equivalence(criterion):
    record = criterion(1, "bridge equivalence, 100 random CRMs x 365 steps")
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        m = random_crm(rng, 3, 2)
        report = equivalence_check(m, rates_only_scenario(m, rng), tol=BRIDGE_TOL)
        worst = max(worst, report.max_relative_deviation)
        assert report.passed
    elapsed = time.perf_counter() - start
    assert worst <= BRIDGE_TOL
    assert elapsed < 30.0
    record(f"max rel dev {worst:.2e} <= {BRIDGE_TOL:.0e}, {elapsed:.1f} s < 30 s")


def test_criterion_2_convolution_forms_agree(criterion):
    record = criterion(2, "superposition vs derivative form")
    rng = np.random.default_rng(2)
    worst = 0.0
    for k in range(100):
        m = random_crm(rng, 3, 2)
        s = rates_only_scenario(m, rng)
        model = crm_to_mdcv(m, s.p0)
        if k % 4 == 0:
            # non-CRM responses on a log node grid for part of the family
            nodes = np.logspace(-1, 2.6, 12)
            responses = {key: Utr(u.jump, nodes, np.log(u.derivative(nodes)) + rng.normal(0, 0.3, nodes.size))
                         for key, u in model.utrs.responses.items()}
            model = type(model)(model.p0, type(model.utrs)(model.utrs.wells, responses))
        times = {n: s.pressures[n].times for n in m.producers}
        a = simulate_pressure(model, s.rates, times)
        b = simulate_pressure_derivative_form(model, s.rates, times)
        for n in m.producers:
            scale = float(np.max(np.abs(a[n].pressures)))
            worst = max(worst, float(np.max(np.abs(a[n].pressures - b[n].pressures))) / scale)
    assert worst <= FORMS_TOL
    record(f"max rel dev {worst:.2e} <= {FORMS_TOL:.0e}")


def test_criterion_3_crm_round_trip(criterion):
    record = criterion(3, "CRM fit round trip")
    rng = np.random.default_rng(3)
    truth = random_crm(rng, 3, 2)
    s = crm_scenario(truth, rng, p0_known=False)
    start = time.perf_counter()
    fit, report = crm_fit(s, "pressure_fit")
    elapsed = time.perf_counter() - start
    tau_err = float(np.max(np.abs(fit.tau / truth.tau - 1)))
    gamma_err = float(np.max(np.abs(fit.gamma / truth.gamma - 1)))
    f_err = float(np.max(np.abs(fit.connectivity - truth.connectivity)))
    assert tau_err <= CRM_REL_TOL and gamma_err <= CRM_REL_TOL and f_err <= CRM_F_TOL
    assert elapsed < 10.0
    # constraints hold exactly, with and without strict allocation
    for strict in (False, True):
        m, _ = crm_fit(s, "pressure_fit", strict)
        cols = m.connectivity.sum(axis=0)
        assert np.all(m.connectivity >= 0.0) and np.all(m.tau >= 0.0) and np.all(m.gamma > 0.0)
        assert np.all(cols <= 1.0)
        if strict:
            assert np.all(cols == 1.0)
    record(f"tau {tau_err:.1e}, gamma {gamma_err:.1e}, f {f_err:.1e}, {elapsed:.1f} s < 10 s")


def test_criterion_4_mdcv_round_trip(criterion):
    record = criterion(4, "MDCV round trip on CRM-form truth, p0 free")
    rng = np.random.default_rng(4)
    truth = random_crm(rng, 3, 2)
    s = crm_scenario(truth, rng, p0_known=False)
    start = time.perf_counter()
    model, report = deconvolve(s, MdcvOptions(activity="crm"))
    elapsed = time.perf_counter() - start
    ref = crm_to_mdcv(truth, {n: 250.0 for n in truth.producers})
    t = np.logspace(-1, 2, 25)
    dtr_err = max(float(np.max(np.abs(model.utrs.get(n, n)(t) / ref.utrs.get(n, n)(t) - 1)))
                  for n in truth.producers)
    ctr_err = max(float(np.max(np.abs(model.utrs.get(n, m)(t) / ref.utrs.get(n, m)(t) - 1)))
                  for n in truth.producers for m in truth.injectors)
    p0_err = max(abs(model.p0[n] - 250.0) for n in truth.producers)
    assert dtr_err <= DTR_REL_TOL and ctr_err <= DTR_REL_TOL
    assert p0_err <= P0_TOL_BAR
    assert elapsed < 300.0
    record(f"DTR {dtr_err:.1e}, CTR {ctr_err:.1e}, p0 {p0_err:.1e} bar, {elapsed:.1f} s < 300 s")


def test_criterion_5_mdcv_beyond_crm(criterion):
    record = criterion(5, "MDCV beats CRM on an infinite-acting synthetic")
    spec = SyntheticSpec(LAYOUT, ReservoirParams(50.0, 2e-4, 0.1, skin=2.0),
                         schedule=RateSchedule(event_probability=0.06), pressure_noise_std=0.05, seed=5)
    s, _, _ = generate_scenario(spec)
    split = SplitSpec(boundary=300.0)
    _, mdcv = cross_validate(s, split, "mdcv")
    _, crm = cross_validate(s, split, "crm", "pressure_fit")
    # CRM models producers only: compare on the same producer samples too
    mdcv_prod = [mdcv.series[n] for n in ("P1", "P2")]
    p = np.concatenate([x[1] for x in mdcv_prod])
    a = np.concatenate([x[2] for x in mdcv_prod])
    r2_prod = 1.0 - float(np.sum((p - a) ** 2)) / float(np.sum((a - a.mean()) ** 2))
    assert mdcv.r2 >= MDCV_R2_MIN and r2_prod >= MDCV_R2_MIN
    assert crm.r2 < mdcv.r2 and crm.r2 < r2_prod
    record(f"MDCV r2 {mdcv.r2:.4f} (producers {r2_prod:.4f}) > CRM r2 {crm.r2:.4f}")


def test_criterion_6_rate_correction(criterion):
    record = criterion(6, "rate correction halves the corruption error")
    spec = SyntheticSpec(LAYOUT, ReservoirParams(20.0, 2e-4, 0.1, skin=2.0),
                         schedule=RateSchedule(event_probability=0.06), pressure_noise_std=0.05,
                         rate_corruption_std=0.2, seed=5)
    s, _, true_rates = generate_scenario(spec)
    # a 200-iteration budget: more iterations leave the ratio unchanged at 4x the runtime
    model, report = deconvolve(s, MdcvOptions(fit_rate_corrections=True, gn_iterations=200))
    corrected = correct_rates(model, s)
    num = den = 0.0
    for n in s.names:
        e1 = corrected[n].rates - true_rates[n].rates
        e0 = s.rates[n].rates - true_rates[n].rates
        num += float(e1 @ e1)
        den += float(e0 @ e0)
    ratio = float(np.sqrt(num / den))
    assert ratio <= CORRECTION_RATIO_MAX
    record(f"corrected/corrupted RMS {ratio:.3f} <= {CORRECTION_RATIO_MAX} (fit status {report.status})")


def test_criterion_7_constant_rates_never_give_a_model(criterion, tmp_path):
    record = criterion(7, "constant rates: no_variation, exit code 2, no model")
    spec = SyntheticSpec(LAYOUT, ReservoirParams(50.0, 2e-4, 0.1), schedule=RateSchedule(event_probability=0.0),
                         pressure_noise_std=0.05, seed=7)
    s, _, _ = generate_scenario(spec)
    model, report = deconvolve(s)
    assert model is None and report.status == "no_variation"
    model, report = crm_fit(s)
    assert model is None and report.status == "no_variation"
    for engine in ("mdcv", "crm"):
        model, vr = cross_validate(s, SplitSpec(boundary=300.0), engine)
        assert model is None and vr.verdict == NO_VALIDATION
    data = tmp_path / "data"
    paths = write_scenario(s, data)
    args = ["--config", str(paths[2]), "--rates", str(paths[0]), "--pressures", str(paths[1])]
    codes = {}
    for cmd in (["deconvolve"], ["crm", "fit"], ["validate", "--boundary", "300"]):
        out = tmp_path / cmd[0]
        codes[" ".join(cmd)] = run([*cmd, *args, "--out", str(out)])
        assert not (out / "model.json").exists() and not (out / "crm_model.json").exists()
    assert set(codes.values()) == {2}
    record("deconvolve, crm fit, validate: exit 2, no model written")


def jacobian_problem(rng) -> MdcvProblem:
    t = np.arange(60.0)
    rates = {"P": step_schedule(rng, 60, 30, 120, 0.2), "I": step_schedule(rng, 60, 50, 150, 0.2, -1.0),
             "Q": step_schedule(rng, 60, 30, 120, 0.2)}
    ps = {n: PressureSeries(t[1:] + 0.5, 250 - rng.uniform(0, 30, 59)) for n in ("P", "Q")}
    wells = (Well("P", PRODUCER), Well("I", INJECTOR), Well("Q", PRODUCER))
    cum = (CumulativeRecord(0.0, 30.0, 2500.0, ("P", "Q")),)
    s = Scenario(wells, rates, ps, {"Q": 250.0}, cum)
    return MdcvProblem(s, MdcvOptions(fit_rate_corrections=True, lambda_cumulative=0.3, nodes_per_decade=3))


def test_criterion_8_numerical_checks(criterion):
    record = criterion(8, "Jacobian, Stieltjes quadrature and ODE oracles")
    rng = np.random.default_rng(8)
    problem = jacobian_problem(rng)
    jac = 0.0
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
                x[i] = rng.uniform(problem.lower[i] + 0.01, problem.upper[i] - 0.01)
        jac = max(jac, jacobian_check(problem, x))
    assert jac < JACOBIAN_TOL

    quad = 0.0
    for _ in range(30):
        n_nodes = int(rng.integers(2, 7))
        u = Utr(rng.uniform(0, 0.5), np.logspace(-1, 2, n_nodes), rng.uniform(-7, -1, n_nodes))
        n_steps = int(rng.integers(1, 12))
        rh = RateHistory(np.arange(n_steps) * 1.7, rng.uniform(-200, 200, n_steps))
        t = float(rng.uniform(0.3, 30.0))
        model = crm_to_mdcv(CrmModel(("P",), (), [1.0], [1.0], np.zeros((1, 0))), {"P": 0.0})
        model = type(model)(model.p0, type(model.utrs)(("P",), {("P", "P"): u}))
        ours = -simulate_pressure(model, {"P": rh}, [t])["P"].pressures[0]
        oracle = stieltjes_oracle(u, rh, t)
        quad = max(quad, abs(ours - oracle) / max(abs(oracle), 1e-12))
    assert quad <= QUADRATURE_TOL

    ode = 0.0
    for _ in range(30):
        tau, gamma, f = rng.uniform(0.5, 30), rng.uniform(10, 200), rng.uniform(0, 1)
        inj = step_schedule(rng, 30, 50, 200, 0.3, sign=-1.0)
        bt = np.sort(rng.choice(np.arange(0.25, 30.0, 0.25), 25, replace=False))
        bhp = PressureSeries(bt, 150 + np.cumsum(rng.normal(0, 2, bt.size)))
        q0 = rng.uniform(0, 150)
        m = CrmModel(("P",), ("I",), [tau], [gamma], [[f]])
        sim = crm_simulate_rates(m, {"I": inj}, {"P": bhp}, {"P": q0})["P"]
        ours = sim.value_at(bt[1:], side="right")
        oracle = ode_rates(tau, gamma, f, inj, bhp, q0, bt[1:])
        ode = max(ode, float(np.max(np.abs(ours - oracle))) / max(float(np.max(np.abs(oracle))), 1.0))
    assert ode <= ODE_TOL
    record(f"Jacobian {jac:.1e} < {JACOBIAN_TOL:.0e}, quadrature {quad:.1e} <= {QUADRATURE_TOL:.0e}, "
           f"ODE {ode:.1e} <= {ODE_TOL:.0e}")


SYNTH_SPEC = """
seed = 3
pressure_noise_std = 0.02
p0_known = true
[reservoir]
transmissibility = 50.0
storativity = 2e-4
well_radius = 0.1
[schedule]
n_steps = 120
event_probability = 0.1
[[wells]]
name = "P1"
role = "producer"
[[wells]]
name = "I1"
role = "injector"
x = 400.0
"""


def test_criterion_9_determinism(criterion, tmp_path):
    record = criterion(9, "every subcommand reruns byte-for-byte")
    (tmp_path / "spec.toml").write_text(SYNTH_SPEC)
    d = tmp_path / "data"
    assert run(["synth", "--spec", str(tmp_path / "spec.toml"), "--out", str(d)]) == 0
    data = ["--config", str(d / "scenario.toml"), "--rates", str(d / "scenario_rates.csv"),
            "--pressures", str(d / "scenario_pressures.csv")]
    crm = CrmModel(("P1",), ("I1",), [6.0], [50.0], [[0.4]])
    (tmp_path / "crm.json").write_text(json.dumps(crm.to_dict()))
    assert run(["deconvolve", *data, "--out", str(tmp_path / "fit")]) == 0
    model = str(tmp_path / "fit" / "model.json")
    commands = {
        "qc": ["qc", *data],
        "synth": ["synth", "--spec", str(tmp_path / "spec.toml"), "--seed", "11"],
        "simulate rate-control": ["simulate", "rate-control", "--model", model,
                                  "--rates", str(d / "scenario_rates.csv"), "--grid", "1:150:0.5"],
        "simulate pressure-control": ["simulate", "pressure-control", "--model", model,
                                      "--rates", str(d / "scenario_rates.csv"),
                                      "--targets", str(d / "scenario_pressures.csv"), "--start", "60"],
        "deconvolve": ["deconvolve", *data],
        "crm fit": ["crm", "fit", *data],
        "crm simulate": ["crm", "simulate", *data, "--model", str(tmp_path / "crm.json")],
        "bridge": ["bridge", "--model", str(tmp_path / "crm.json"), "--seed", "4"],
        "validate": ["validate", *data, "--boundary", "90"],
        "rehearse": ["rehearse", "--spec", str(tmp_path / "spec.toml"), "--boundary", "60", "--boundary", "90"],
    }
    for k, (name, cmd) in enumerate(commands.items()):
        outs = [tmp_path / f"run{k}{tag}" for tag in "ab"]
        codes = [run([*cmd, "--out", str(o)]) for o in outs]
        assert codes[0] == codes[1], name
        files = [{p.name: p.read_bytes() for p in sorted(o.iterdir())} for o in outs]
        assert files[0] == files[1], name
        assert len(files[0]) >= 1
    record(f"{len(commands)} subcommands identical across reruns")
