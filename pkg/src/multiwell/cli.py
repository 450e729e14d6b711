"""Command-line entry point.

Exit codes: 0 success, 1 usage or I/O error, 2 validation failure or no
rate variation, 3 fatal data-quality failure, 4 convergence failure.
Every subcommand writes a JSON report with a ``status`` field, also when it
fails after the output directory is known.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .bridge import DEFAULT_TOLERANCE, crm_to_mdcv, equivalence_check
from .convolution import DeconvolutionModel, simulate_pressure, simulate_rates
from .crm import FIT_KINDS, PRESSURE_FIT, CrmFitMode, CrmModel, crm_fit, crm_simulate_pressure, crm_simulate_rates
from .errors import DataError, FitError, InfeasibleAllocation, ModelError, PressureControlInfeasible
from .mdcv import MdcvOptions, deconvolve
from .reports import BUDGET_EXHAUSTED, NO_VARIATION, write_json
from .synthetic import CRM as CRM_SOURCE
from .synthetic import RateSchedule, SyntheticSpec, WellSite, generate_scenario, spec_from_dict
from .validation import DEFAULT_THRESHOLD, VALIDATED, cross_validate, rehearse_split
from .welldata import (
    INJECTOR,
    PRODUCER,
    RateHistory,
    Scenario,
    SplitSpec,
    load_scenario,
    qc_report,
    read_config,
    read_pressure_csv,
    read_rate_csv,
    write_pressure_csv,
    write_rate_csv,
    write_scenario,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_QC = 3
EXIT_CONVERGENCE = 4


class UsageError(Exception):
    """Bad command-line input detected after parsing."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers


def _reading(fn, *a):
    """Run an input reader; malformed input becomes a usage error."""
    try:
        return fn(*a)
    except DataError as exc:
        raise UsageError(str(exc)) from exc


def _load(args) -> Scenario:
    if not args.config:
        raise UsageError("--config is required")
    return _reading(load_scenario, args.rates or [], args.pressures or [], args.config)


def _read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON: {exc}") from exc


def _read_rates(paths) -> dict[str, RateHistory]:
    out: dict[str, RateHistory] = {}
    for path in paths or []:
        out.update(_reading(read_rate_csv, path))
    return out


def _grid(text: str) -> np.ndarray:
    try:
        start, stop, step = (float(v) for v in text.split(":"))
    except ValueError as exc:
        raise UsageError(f"--grid expects START:STOP:STEP, got {text!r}") from exc
    if not step > 0 or stop < start:
        raise UsageError("--grid needs STEP > 0 and STOP >= START")
    n = int(np.floor((stop - start) / step + 1e-9))
    return start + step * np.arange(n + 1)


def _intervals(text: str) -> tuple[tuple[float, float], ...]:
    try:
        return tuple(tuple(float(v) for v in part.split(":")) for part in text.split(","))
    except ValueError as exc:
        raise UsageError(f"--intervals expects A:B[,C:D...], got {text!r}") from exc


def _split(args) -> SplitSpec:
    if (args.boundary is None) == (args.intervals is None):
        raise UsageError("give exactly one of --boundary and --intervals")
    if args.boundary is not None:
        return SplitSpec(boundary=args.boundary)
    return SplitSpec(intervals=_intervals(args.intervals), mode="interval-list")


def _mdcv_options(args) -> MdcvOptions:
    activity = args.activity
    if activity not in ("all", "crm"):
        activity = tuple(tuple(p.split(":")) for p in activity.split(","))
    return MdcvOptions(
        pressure_weight=args.pressure_weight,
        rate_weight=args.rate_weight,
        lambda_curvature=args.lambda_curvature,
        lambda_cumulative=args.lambda_cumulative,
        rate_correction_band=(args.band_low, args.band_high),
        fit_rate_corrections=args.fit_rate_corrections,
        activity=activity,
        nodes_per_decade=args.nodes_per_decade,
        de_population=args.de_population,
        de_generations=args.de_generations,
        gn_iterations=args.gn_iterations,
        tolerance=args.tolerance,
        seed=args.seed,
    )


def _crm_mode(args) -> CrmFitMode:
    return CrmFitMode(args.mode, rate_weight=args.rate_fit_weight, icrm_weight=args.icrm_weight)


def _write_residuals(path: Path, s: Scenario, residuals) -> None:
    """Residual table against the training pressure samples."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["well", "time_days", "residual"])
        for name, values in residuals.items():
            times = s.pressures[name].times if name in s.pressures else np.arange(len(values), dtype=float)
            if len(times) != len(values):
                times = np.arange(len(values), dtype=float)
            for t, r in zip(times, values):
                w.writerow([name, repr(float(t)), repr(float(r))])


def _write_series(path: Path, series) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["well", "time_days", "predicted", "observed"])
        for name, (t, p, o) in series.items():
            for row in zip(t, p, o):
                w.writerow([name, *(repr(float(v)) for v in row)])


def _write_utrs(path: Path, model: DeconvolutionModel) -> None:
    """Responses on a log grid covering the model's nodes."""
    nodes = [u.node_times for u in model.utrs.responses.values() if u.node_times.size]
    lo = min(float(n[0]) for n in nodes) if nodes else 1e-2
    hi = max(float(n[-1]) for n in nodes) if nodes else 1e3
    t = np.geomspace(lo, hi, 200)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["observer", "source", "time_days", "response_bar_per_m3d", "derivative"])
        for (n, m), u in model.utrs.responses.items():
            for ti, ui, di in zip(t, u(t), u.derivative(t)):
                w.writerow([n, m, repr(float(ti)), repr(float(ui)), repr(float(di))])


def _fit_exit(status: str) -> int:
    if status == NO_VARIATION:
        return EXIT_VALIDATION
    if status == BUDGET_EXHAUSTED:
        return EXIT_CONVERGENCE
    return EXIT_OK


# ---------------------------------------------------------------------------
# subcommands; each returns (exit code, report)


def cmd_qc(args, out: Path):
    s = _load(args)
    qc = qc_report(s)
    code = EXIT_QC if qc.verdict == "fail" else EXIT_OK
    return code, {"status": qc.verdict, **qc.to_dict()}


def cmd_synth(args, out: Path):
    if not args.spec:
        raise UsageError("--spec is required")
    spec = _reading(_read_spec, args.spec)
    if args.seed_given:
        spec = _replace_seed(spec, args.seed)
    s, truth, true_rates = generate_scenario(spec)
    paths = write_scenario(s, out, stem="scenario")
    write_rate_csv(true_rates, out / "true_rates.csv")
    truth_doc = {"kind": "crm" if isinstance(truth, CrmModel) else "mdcv", "model": truth.to_dict()}
    if spec.reservoir is not None:
        truth_doc["reservoir"] = spec.reservoir.to_dict()
        truth_doc["layout"] = [{"name": w.name, "role": w.role, "x": w.x, "y": w.y} for w in spec.wells]
    write_json(truth_doc, out / "truth.json")
    return EXIT_OK, {
        "status": "ok",
        "seed": spec.seed,
        "files": [p.name for p in paths] + ["true_rates.csv", "truth.json"],
        "n_pressure_samples": {n: len(ps) for n, ps in s.pressures.items()},
        "n_rate_steps": {n: len(rh) for n, rh in s.rates.items()},
    }


def _read_spec(path) -> SyntheticSpec:
    return spec_from_dict(read_config(path))


def _replace_seed(spec: SyntheticSpec, seed: int) -> SyntheticSpec:
    return replace(spec, seed=seed)


def cmd_simulate(args, out: Path):
    model = _reading(DeconvolutionModel.from_dict, _read_json(args.model))
    rates = _read_rates(args.rates)
    if args.control == "rate-control":
        if args.grid:
            times = _grid(args.grid)
        elif args.at:
            times = {n: ps.times for n, ps in _reading(read_pressure_csv, args.at).items()}
        else:
            raise UsageError("rate-control needs --grid or --at")
        sim = simulate_pressure(model, rates, times)
        write_pressure_csv(sim, out / "simulated_pressures.csv")
        return EXIT_OK, {"status": "ok", "control": "rate", "n_points": {n: len(p) for n, p in sim.items()}}
    if not args.targets:
        raise UsageError("pressure-control needs --targets")
    targets = _reading(read_pressure_csv, args.targets)
    fixed = {n: rh for n, rh in rates.items() if n not in targets}
    start = 0.0 if args.start is None else args.start
    history = {}
    for n, rh in rates.items():
        if n in targets:
            keep = rh.times < start
            history[n] = RateHistory(rh.times[keep], rh.rates[keep])
    sim = simulate_rates(model, targets, fixed, history=history, start=start)
    write_rate_csv(sim, out / "simulated_rates.csv")
    return EXIT_OK, {"status": "ok", "control": "pressure", "n_steps": {n: len(r) for n, r in sim.items()}}


def cmd_deconvolve(args, out: Path):
    s = _load(args)
    opts = _mdcv_options(args)
    model, report = deconvolve(s, opts, force=args.force)
    doc = {**report.to_dict(), "options": opts.to_dict()}
    if model is not None:
        write_json(model.to_dict(), out / "model.json")
        _write_residuals(out / "residuals.csv", s, report.residuals)
        _write_utrs(out / "utr_curves.csv", model)
    return _fit_exit(report.status), doc


def cmd_crm_fit(args, out: Path):
    s = _load(args)
    mode = _crm_mode(args)
    model, report = crm_fit(s, mode, args.strict, interference=args.interference)
    if model is not None:
        write_json(model.to_dict(), out / "crm_model.json")
        _write_residuals(out / "residuals.csv", s, report.residuals)
    return _fit_exit(report.status), report.to_dict()


def cmd_crm_simulate(args, out: Path):
    model = _reading(CrmModel.from_dict, _read_json(args.model))
    s = _load(args)
    injections = {n: s.rates[n] for n in s.names if n not in model.producers or model.interference is not None}
    if args.predict == "rate":
        q0 = {}
        for n in model.producers:
            ps = s.pressures[n]
            if len(ps) == 0:
                raise DataError(f"no bottomhole pressure for producer {n!r}")
            rec = s.rates[n]
            q0[n] = float(rec.value_at(ps.times[0], side="right")) if len(rec) else 0.0
        sim = crm_simulate_rates(model, injections, s.pressures, q0)
        write_rate_csv(sim, out / "simulated_rates.csv")
        return EXIT_OK, {"status": "ok", "predict": "rate", "q0": q0}
    p_start = {}
    for n in model.producers:
        if args.p0 is not None:
            p_start[n] = args.p0
        elif n in s.p0:
            p_start[n] = s.p0[n]
        else:
            raise UsageError(f"initial pressure of {n!r} missing: set p0_bar in the config or pass --p0")
    if args.grid:
        times = _grid(args.grid)
    else:
        times = {n: s.pressures[n].times for n in model.producers}
    production = {n: s.rates[n] for n in s.producers}
    inj = {n: s.rates[n] for n in s.injectors}
    sim = crm_simulate_pressure(model, production, inj, p_start, times)
    write_pressure_csv(sim, out / "simulated_pressures.csv")
    return EXIT_OK, {"status": "ok", "predict": "pressure", "p0": p_start}


def cmd_bridge(args, out: Path):
    model = _reading(CrmModel.from_dict, _read_json(args.model))
    if args.config:
        s = _load(args)
        if args.p0 is not None:
            s = Scenario(s.wells, s.rates, s.pressures, {n: args.p0 for n in model.producers},
                         s.cumulative_reference)
        source = "input"
    else:
        # no data given: check on a seeded random step schedule
        wells = tuple(WellSite(n, PRODUCER, float(i), 0.0) for i, n in enumerate(model.producers))
        wells += tuple(WellSite(n, INJECTOR, float(i), 1.0) for i, n in enumerate(model.injectors))
        spec = SyntheticSpec(wells, source=CRM_SOURCE, crm_model=model,
                             p0=250.0 if args.p0 is None else args.p0,
                             schedule=RateSchedule(), p0_known=True, seed=args.seed)
        s = generate_scenario(spec)[0]
        source = "synthetic"
    missing = [n for n in model.producers if n not in s.p0]
    if missing:
        raise UsageError(f"initial pressures missing for {missing}: set p0_bar in the config or pass --p0")
    conv = crm_to_mdcv(model, s.p0)
    write_json(conv.to_dict(), out / "model.json")
    eq = equivalence_check(m=model, s=s, tol=args.tol, model=conv)
    doc = {"status": "passed" if eq.passed else "failed", "scenario": source, **eq.to_dict()}
    doc.pop("per_well")
    doc["max_abs_deviation_bar"] = {n: max(v, default=0.0) for n, v in eq.per_well.items()}
    return (EXIT_OK if eq.passed else EXIT_VALIDATION), doc


def cmd_validate(args, out: Path):
    s = _load(args)
    split = _split(args)
    opts = _mdcv_options(args) if args.engine == "mdcv" else _crm_mode(args)
    model, report = cross_validate(s, split, args.engine, opts, args.threshold_r2)
    if model is not None:
        name = "model.json" if args.engine == "mdcv" else "crm_model.json"
        write_json(model.to_dict(), out / name)
    _write_series(out / "validation_series.csv", report.series)
    doc = {"status": report.verdict, "engine": args.engine, "split": split.to_dict(), **report.to_dict()}
    return (EXIT_OK if report.verdict == VALIDATED else EXIT_VALIDATION), doc


def cmd_rehearse(args, out: Path):
    if not args.spec:
        raise UsageError("--spec is required")
    spec = _reading(_read_spec, args.spec)
    if args.seed_given:
        spec = _replace_seed(spec, args.seed)
    if args.rates:
        spec = replace(spec, rates=_read_rates(args.rates))
    candidates = [SplitSpec(boundary=b) for b in args.boundary or []]
    candidates += [SplitSpec(intervals=_intervals(iv), mode="interval-list") for iv in args.intervals or []]
    if not candidates:
        raise UsageError("give at least one candidate via --boundary or --intervals")
    opts = _mdcv_options(args) if args.engine == "mdcv" else _crm_mode(args)
    result = rehearse_split(spec, candidates, args.engine, args.threshold_r2, args.max_iter, opts)
    doc = {"status": result.verdict, "engine": args.engine, **result.to_dict()}
    return (EXIT_OK if result.verdict == VALIDATED else EXIT_VALIDATION), doc


DATA_COMMANDS = ("qc", "deconvolve", "crm fit", "validate", "rehearse")

REPORT_NAMES = {
    "qc": "qc_report.json",
    "synth": "synth_report.json",
    "simulate": "simulate_report.json",
    "deconvolve": "fit_report.json",
    "crm fit": "fit_report.json",
    "crm simulate": "simulate_report.json",
    "bridge": "equivalence_report.json",
    "validate": "validation_report.json",
    "rehearse": "rehearsal_report.json",
}


# ---------------------------------------------------------------------------
# parser


def _add_data(p, required_config: bool = True):
    p.add_argument("--config", help="scenario TOML (wells, roles, p0_bar, injection_sign, cumulative)")
    p.add_argument("--rates", action="append", metavar="CSV", help="rate CSV (repeatable)")
    p.add_argument("--pressures", action="append", metavar="CSV", help="pressure CSV (repeatable)")


def _add_mdcv(p):
    g = p.add_argument_group("deconvolution options")
    d = MdcvOptions()
    g.add_argument("--pressure-weight", type=float, default=d.pressure_weight)
    g.add_argument("--rate-weight", type=float, default=d.rate_weight)
    g.add_argument("--lambda-curvature", type=float, default=d.lambda_curvature)
    g.add_argument("--lambda-cumulative", type=float, default=d.lambda_cumulative)
    g.add_argument("--band-low", type=float, default=d.rate_correction_band[0])
    g.add_argument("--band-high", type=float, default=d.rate_correction_band[1])
    g.add_argument("--fit-rate-corrections", action="store_true")
    g.add_argument("--activity", default=d.activity,
                   help="'all', 'crm' or OBS:SRC[,OBS:SRC...]")
    g.add_argument("--nodes-per-decade", type=int, default=d.nodes_per_decade)
    g.add_argument("--de-population", type=int, default=d.de_population)
    g.add_argument("--de-generations", type=int, default=d.de_generations)
    g.add_argument("--gn-iterations", type=int, default=d.gn_iterations)
    g.add_argument("--tolerance", type=float, default=d.tolerance)


def _add_crm(p):
    g = p.add_argument_group("CRM options")
    g.add_argument("--mode", choices=FIT_KINDS, default=PRESSURE_FIT)
    g.add_argument("--rate-fit-weight", type=float, default=1.0, help="rate rows weight in weighted_combo")
    g.add_argument("--icrm-weight", type=float, default=1.0, help="cumulative rows weight in weighted_combo")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--out", default=".", help="output directory (default: current)")
    common.add_argument("--seed", type=int, default=None, help="seed of the run's random generator")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = _Parser(prog="multiwell", description="Multiwell deconvolution and CRM toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("qc", parents=[common], help="data-quality report")
    _add_data(p)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic scenario")
    p.add_argument("--spec", help="synthetic spec TOML")

    p = sub.add_parser("simulate", parents=[common], help="forward simulation with a convolution model")
    p.add_argument("control", choices=("rate-control", "pressure-control"))
    p.add_argument("--model", required=True, help="model JSON")
    p.add_argument("--rates", action="append", metavar="CSV")
    p.add_argument("--grid", help="query times START:STOP:STEP (rate control)")
    p.add_argument("--at", metavar="CSV", help="pressure CSV whose times are queried (rate control)")
    p.add_argument("--targets", metavar="CSV", help="target pressures (pressure control)")
    p.add_argument("--start", type=float, default=None, help="control start time, default 0; earlier recorded steps of controlled wells are kept")

    p = sub.add_parser("deconvolve", parents=[common], help="fit a deconvolution model")
    _add_data(p)
    _add_mdcv(p)
    p.add_argument("--force", action="store_true", help="fit despite fatal QC flags other than no variation")

    crm = sub.add_parser("crm", help="capacitance resistance model").add_subparsers(dest="crm_command", required=True)
    p = crm.add_parser("fit", parents=[common], help="fit a CRM")
    _add_data(p)
    _add_crm(p)
    p.add_argument("--strict", action="store_true", help="injector column sums exactly 1")
    p.add_argument("--interference", action="store_true", help="offset producers as extra sources")
    p = crm.add_parser("simulate", parents=[common], help="simulate with a CRM")
    _add_data(p)
    p.add_argument("--model", required=True, help="CRM JSON")
    p.add_argument("--predict", choices=("pressure", "rate"), default="pressure")
    p.add_argument("--p0", type=float, default=None, help="initial pressure of every producer")
    p.add_argument("--grid", help="query times START:STOP:STEP (pressure prediction)")

    p = sub.add_parser("bridge", parents=[common], help="convert a CRM and check equivalence")
    _add_data(p)
    p.add_argument("--model", required=True, help="CRM JSON")
    p.add_argument("--p0", type=float, default=None, help="initial pressure of every producer")
    p.add_argument("--tol", type=float, default=DEFAULT_TOLERANCE)

    p = sub.add_parser("validate", parents=[common], help="train/validate on a time split")
    _add_data(p)
    p.add_argument("--engine", choices=("mdcv", "crm"), default="mdcv")
    p.add_argument("--boundary", type=float, default=None)
    p.add_argument("--intervals", default=None, help="training intervals A:B[,C:D...]")
    p.add_argument("--threshold-r2", type=float, default=DEFAULT_THRESHOLD)
    _add_mdcv(p)
    _add_crm(p)

    p = sub.add_parser("rehearse", parents=[common], help="rehearse candidate splits on synthetic data")
    p.add_argument("--spec", help="synthetic spec TOML")
    p.add_argument("--rates", action="append", metavar="CSV", help="field rate CSV replacing the schedule")
    p.add_argument("--engine", choices=("mdcv", "crm"), default="mdcv")
    p.add_argument("--boundary", type=float, action="append", help="candidate boundary (repeatable)")
    p.add_argument("--intervals", action="append", help="candidate training intervals (repeatable)")
    p.add_argument("--threshold-r2", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--max-iter", type=int, default=None)
    _add_mdcv(p)
    _add_crm(p)
    return parser


COMMANDS = {
    "qc": cmd_qc,
    "synth": cmd_synth,
    "simulate": cmd_simulate,
    "deconvolve": cmd_deconvolve,
    "crm fit": cmd_crm_fit,
    "crm simulate": cmd_crm_simulate,
    "bridge": cmd_bridge,
    "validate": cmd_validate,
    "rehearse": cmd_rehearse,
}


def run(argv: Sequence[str] | None = None) -> int:
    """Execute one subcommand and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    args.seed_given = args.seed is not None
    if args.seed is None:
        args.seed = 0
    key = args.command if args.command != "crm" else f"crm {args.crm_command}"
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"multiwell: cannot create output directory: {exc}", file=sys.stderr)
        return EXIT_USAGE

    report_path = out / REPORT_NAMES[key]
    try:
        code, report = COMMANDS[key](args, out)
    except UsageError as exc:
        code, report = EXIT_USAGE, {"status": "error", "error": str(exc)}
    except OSError as exc:
        code, report = EXIT_USAGE, {"status": "error", "error": f"{type(exc).__name__}: {exc}"}
    except DataError as exc:
        # inputs parsed but the data cannot support the analysis
        code = EXIT_QC if key in DATA_COMMANDS else EXIT_USAGE
        report = {"status": "error", "error": str(exc)}
    except (FitError, InfeasibleAllocation, PressureControlInfeasible) as exc:
        code, report = EXIT_CONVERGENCE, {"status": "error", "error": f"{type(exc).__name__}: {exc}"}
    except ModelError as exc:
        code, report = EXIT_USAGE, {"status": "error", "error": f"{type(exc).__name__}: {exc}"}
    if code != EXIT_OK:
        print(f"multiwell {key}: {report.get('error', report.get('status'))}", file=sys.stderr)
    report = {**report, "command": key, "exit_code": code}
    write_json(report, report_path)
    return code


def main() -> None:
    sys.exit(run())
