"""Wells, rate/pressure histories, ingestion, data-quality checks and splits.

Units are fixed throughout the package: time in days, pressure in bar,
rate in m3/day. Production rates are positive, injection rates negative.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError

try:  # pragma: no cover - exercised depending on interpreter
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

PRODUCER = "producer"
INJECTOR = "injector"
ROLES = (PRODUCER, INJECTOR)

# QC thresholds
PRESSURE_RESOLUTION_BAR = 1.0
SAMPLING_INTERVAL_DAYS = 1.0 / 24.0
CUMULATIVE_TOLERANCE = 0.30
VARIATION_THRESHOLD = 0.05


def _frozen_array(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Well:
    name: str
    role: str

    def __post_init__(self):
        if not isinstance(self.name, str) or not self.name.strip():
            raise DataError("well name must be a non-empty string")
        if self.role not in ROLES:
            raise DataError(f"well {self.name!r}: role must be one of {ROLES}, got {self.role!r}")


@dataclass(frozen=True, eq=False)
class RateHistory:
    """Piecewise-constant rate history.

    ``rates[k]`` holds on ``[times[k], times[k+1])``; the last step holds
    indefinitely. The rate is zero for ``t <= times[0]`` and for all
    ``t <= 0``.
    """

    times: np.ndarray
    rates: np.ndarray

    def __post_init__(self):
        t = _frozen_array(self.times, "times")
        q = _frozen_array(self.rates, "rates")
        if t.shape != q.shape:
            raise DataError("rate history: times and rates differ in length")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(q))):
            raise DataError("rate history: non-finite value")
        if t.size and t[0] < 0:
            raise DataError("rate history: step times must be >= 0")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise DataError("rate history: step times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "rates", q)

    @classmethod
    def empty(cls) -> "RateHistory":
        return cls(np.empty(0), np.empty(0))

    def __len__(self):
        return self.times.size

    def __eq__(self, other):
        if not isinstance(other, RateHistory):
            return NotImplemented
        return np.array_equal(self.times, other.times) and np.array_equal(self.rates, other.rates)

    __hash__ = None

    def increments(self) -> np.ndarray:
        """Signed rate changes at each step time (first one measured from 0)."""
        return np.diff(self.rates, prepend=0.0)

    def value_at(self, t, side: str = "right") -> np.ndarray:
        """Rate at ``t``.

        ``side="right"`` returns the step holding on ``[t_k, t_k+1)``;
        ``side="left"`` returns the limit from below, i.e. the rate that has
        acted on the reservoir up to the instant ``t``.
        """
        t = np.asarray(t, dtype=float)
        if self.times.size == 0:
            return np.zeros_like(t)
        idx = np.searchsorted(self.times, t, side=side) - 1
        out = np.where(idx >= 0, self.rates[np.clip(idx, 0, None)], 0.0)
        return out

    def cumulative(self, t) -> np.ndarray:
        """Exact volume produced on ``[0, t]`` (negative for injection)."""
        t = np.asarray(t, dtype=float)
        if self.times.size == 0:
            return np.zeros_like(t)
        # volume at each step start
        durations = np.diff(self.times)
        base = np.concatenate(([0.0], np.cumsum(self.rates[:-1] * durations)))
        idx = np.searchsorted(self.times, t, side="right") - 1
        safe = np.clip(idx, 0, None)
        vol = base[safe] + self.rates[safe] * (t - self.times[safe])
        return np.where(idx >= 0, vol, 0.0)

    def scaled(self, factor) -> "RateHistory":
        return RateHistory(self.times, self.rates * np.asarray(factor, dtype=float))

    def shifted(self, delay: float) -> "RateHistory":
        return RateHistory(self.times + delay, self.rates)

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.rates))) if self.rates.size else 0.0


@dataclass(frozen=True, eq=False)
class PressureSeries:
    """Bottomhole pressure samples with per-sample trust weights."""

    times: np.ndarray
    pressures: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        t = _frozen_array(self.times, "times")
        p = _frozen_array(self.pressures, "pressures")
        w = np.ones_like(t) if self.weights is None else np.array(self.weights, dtype=float).reshape(-1)
        w.setflags(write=False)
        if not (t.shape == p.shape == w.shape):
            raise DataError("pressure series: times, pressures and weights differ in length")
        if not np.all(np.isfinite(p)):
            raise DataError("pressure series: pressures must be finite")
        if not np.all(np.isfinite(t)):
            raise DataError("pressure series: times must be finite")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise DataError("pressure series: weights must be finite and >= 0")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise DataError("pressure series: times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "pressures", p)
        object.__setattr__(self, "weights", w)

    @classmethod
    def empty(cls) -> "PressureSeries":
        return cls(np.empty(0), np.empty(0))

    def __len__(self):
        return self.times.size

    def __eq__(self, other):
        if not isinstance(other, PressureSeries):
            return NotImplemented
        return (
            np.array_equal(self.times, other.times)
            and np.array_equal(self.pressures, other.pressures)
            and np.array_equal(self.weights, other.weights)
        )

    __hash__ = None

    def select(self, mask) -> "PressureSeries":
        mask = np.asarray(mask, dtype=bool)
        return PressureSeries(self.times[mask], self.pressures[mask], self.weights[mask])


@dataclass(frozen=True)
class CumulativeRecord:
    """Reference volume (m3, absolute) of a well group over ``[start, end)``."""

    start: float
    end: float
    volume: float
    wells: tuple[str, ...]

    def __post_init__(self):
        if not (self.end > self.start >= 0):
            raise DataError("cumulative record: need 0 <= start < end")
        if not (math.isfinite(self.volume) and self.volume > 0):
            raise DataError("cumulative record: volume must be positive")
        if not self.wells:
            raise DataError("cumulative record: empty well group")


def group_volume(rates: Mapping[str, RateHistory], record: CumulativeRecord) -> float:
    """Absolute volume moved by the record's well group over its interval."""
    total = 0.0
    for name in record.wells:
        rh = rates[name]
        if len(rh) == 0:
            continue
        total += abs(float(rh.cumulative(record.end) - rh.cumulative(record.start)))
    return total


@dataclass(frozen=True)
class Scenario:
    """A multi-well dataset: roles, rate histories, pressure samples."""

    wells: tuple[Well, ...]
    rates: Mapping[str, RateHistory]
    pressures: Mapping[str, PressureSeries] = field(default_factory=dict)
    p0: Mapping[str, float] = field(default_factory=dict)
    cumulative_reference: tuple[CumulativeRecord, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "wells", tuple(self.wells))
        object.__setattr__(self, "cumulative_reference", tuple(self.cumulative_reference))
        names = [w.name for w in self.wells]
        if len(set(names)) != len(names):
            raise DataError("duplicate well names in scenario")
        known = set(names)
        for name in names:
            if name not in self.rates:
                raise DataError(f"well {name!r} has no rate history")
        for group, label in ((self.rates, "rate"), (self.pressures, "pressure"), (self.p0, "p0")):
            for name in group:
                if name not in known:
                    raise DataError(f"{label} data for undeclared well {name!r}")
        for name, value in self.p0.items():
            if not math.isfinite(value):
                raise DataError(f"p0 for {name!r} must be finite")
        pressures = {n: self.pressures.get(n, PressureSeries.empty()) for n in names}
        object.__setattr__(self, "pressures", pressures)
        object.__setattr__(self, "rates", {n: self.rates[n] for n in names})
        object.__setattr__(self, "p0", dict(self.p0))
        for rec in self.cumulative_reference:
            for name in rec.wells:
                if name not in known:
                    raise DataError(f"cumulative record references unknown well {name!r}")

    @property
    def names(self) -> list[str]:
        return [w.name for w in self.wells]

    def role(self, name: str) -> str:
        for w in self.wells:
            if w.name == name:
                return w.role
        raise KeyError(name)

    @property
    def producers(self) -> list[str]:
        return [w.name for w in self.wells if w.role == PRODUCER]

    @property
    def injectors(self) -> list[str]:
        return [w.name for w in self.wells if w.role == INJECTOR]

    @property
    def end_time(self) -> float:
        """Last time stamp present anywhere in the data."""
        ends = [0.0]
        for rh in self.rates.values():
            if len(rh):
                ends.append(float(rh.times[-1]))
        for ps in self.pressures.values():
            if len(ps):
                ends.append(float(ps.times[-1]))
        return max(ends)

    def with_pressures(self, pressures: Mapping[str, PressureSeries]) -> "Scenario":
        return Scenario(self.wells, self.rates, pressures, self.p0, self.cumulative_reference)

    def with_rates(self, rates: Mapping[str, RateHistory]) -> "Scenario":
        return Scenario(self.wells, rates, self.pressures, self.p0, self.cumulative_reference)


# ---------------------------------------------------------------------------
# ingestion


def _read_rows(path: Path, required: Sequence[str], optional: Sequence[str] = ()):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            return
        expected = list(required)
        if header[: len(expected)] != expected or len(header) > len(expected) + len(optional):
            raise DataError(f"bad header {header}, expected {expected + list(optional)}", path=path, line=1)
        extra = header[len(expected):]
        if extra != list(optional[: len(extra)]):
            raise DataError(f"bad header {header}", path=path, line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header) and not (len(row) == len(expected) and extra):
                raise DataError(f"expected {len(header)} fields, got {len(row)}", path=path, line=lineno)
            yield lineno, [c.strip() for c in row]


def _parse_float(text: str, path, lineno) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"not a number: {text!r}", path=path, line=lineno) from None
    if not math.isfinite(value):
        raise DataError(f"non-finite value: {text!r}", path=path, line=lineno)
    return value


def _check_order(last: dict, name, t, path, lineno):
    prev = last.get(name)
    if prev is not None:
        if t == prev:
            raise DataError(f"duplicate timestamp {t} for well {name!r}", path=path, line=lineno)
        if t < prev:
            raise DataError(f"non-monotone time {t} after {prev} for well {name!r}", path=path, line=lineno)
    last[name] = t


def read_rate_csv(path) -> dict[str, RateHistory]:
    path = Path(path)
    steps: dict[str, list[tuple[float, float]]] = {}
    last: dict[str, float] = {}
    for lineno, (well, t_txt, q_txt) in _read_rows(path, ("well", "time_days", "rate_m3d")):
        if not well:
            raise DataError("empty well id", path=path, line=lineno)
        t = _parse_float(t_txt, path, lineno)
        if t < 0:
            raise DataError(f"negative time {t}", path=path, line=lineno)
        _check_order(last, well, t, path, lineno)
        steps.setdefault(well, []).append((t, _parse_float(q_txt, path, lineno)))
    return {w: RateHistory([s[0] for s in v], [s[1] for s in v]) for w, v in steps.items()}


def read_pressure_csv(path) -> dict[str, PressureSeries]:
    path = Path(path)
    rows: dict[str, list[tuple[float, float, float]]] = {}
    last: dict[str, float] = {}
    for lineno, row in _read_rows(path, ("well", "time_days", "pressure_bar"), ("weight",)):
        well = row[0]
        if not well:
            raise DataError("empty well id", path=path, line=lineno)
        t = _parse_float(row[1], path, lineno)
        p = _parse_float(row[2], path, lineno)
        w = _parse_float(row[3], path, lineno) if len(row) > 3 and row[3] != "" else 1.0
        if w < 0:
            raise DataError(f"negative weight {w}", path=path, line=lineno)
        _check_order(last, well, t, path, lineno)
        rows.setdefault(well, []).append((t, p, w))
    return {
        w: PressureSeries([r[0] for r in v], [r[1] for r in v], [r[2] for r in v])
        for w, v in rows.items()
    }


def read_config(config) -> dict:
    """Accept a TOML path or an already parsed mapping."""
    if isinstance(config, Mapping):
        return dict(config)
    with open(config, "rb") as fh:
        try:
            return tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise DataError(f"{config}: malformed TOML: {exc}") from exc


def load_scenario(rate_files, pressure_files, config) -> Scenario:
    """Build a validated :class:`Scenario` from CSV files and a config.

    Parameters
    ----------
    rate_files, pressure_files : path or sequence of paths
        CSV files; rows for one well may be spread over several files only
        if their times stay increasing in file order.
    config : path or mapping
        ``wells = [{name, role, p0_bar?}]``, ``injection_sign`` (``"negative_in_file"``
        by default, or ``"positive_in_file"``) and an optional
        ``cumulative = [{start_days, end_days, volume_m3, wells?}]`` table.
    """
    cfg = read_config(config)
    if isinstance(rate_files, (str, Path)):
        rate_files = [rate_files]
    if isinstance(pressure_files, (str, Path)):
        pressure_files = [pressure_files]

    wells = []
    p0 = {}
    for entry in cfg.get("wells", []):
        well = Well(str(entry.get("name", "")), str(entry.get("role", "")))
        wells.append(well)
        if "p0_bar" in entry:
            p0[well.name] = float(entry["p0_bar"])
    if not wells:
        raise DataError("config declares no wells")
    declared = {w.name: w for w in wells}

    sign = cfg.get("injection_sign", "negative_in_file")
    if sign not in ("negative_in_file", "positive_in_file"):
        raise DataError(f"injection_sign must be negative_in_file or positive_in_file, got {sign!r}")

    rates: dict[str, RateHistory] = {}
    for path in rate_files:
        for name, rh in read_rate_csv(path).items():
            if name not in declared:
                raise DataError(f"unknown well id {name!r}", path=path)
            rates[name] = _merge_rates(rates.get(name), rh, path)
    pressures: dict[str, PressureSeries] = {}
    for path in pressure_files:
        for name, ps in read_pressure_csv(path).items():
            if name not in declared:
                raise DataError(f"unknown well id {name!r}", path=path)
            pressures[name] = _merge_pressures(pressures.get(name), ps, path)

    for w in wells:
        rh = rates.get(w.name, RateHistory.empty())
        if w.role == INJECTOR and sign == "positive_in_file":
            rh = RateHistory(rh.times, -np.abs(rh.rates))
        rates[w.name] = rh

    cumulative = []
    for entry in cfg.get("cumulative", []):
        group = tuple(entry.get("wells", [w.name for w in wells if w.role == PRODUCER]))
        cumulative.append(
            CumulativeRecord(
                float(entry["start_days"]), float(entry["end_days"]), float(entry["volume_m3"]), group
            )
        )
    return Scenario(tuple(wells), rates, pressures, p0, tuple(cumulative))


def _merge_rates(old: RateHistory | None, new: RateHistory, path) -> RateHistory:
    if old is None:
        return new
    if len(old) and len(new) and new.times[0] <= old.times[-1]:
        raise DataError("non-monotone time across rate files", path=path)
    return RateHistory(np.concatenate((old.times, new.times)), np.concatenate((old.rates, new.rates)))


def _merge_pressures(old: PressureSeries | None, new: PressureSeries, path) -> PressureSeries:
    if old is None:
        return new
    if len(old) and len(new) and new.times[0] <= old.times[-1]:
        raise DataError("non-monotone time across pressure files", path=path)
    return PressureSeries(
        np.concatenate((old.times, new.times)),
        np.concatenate((old.pressures, new.pressures)),
        np.concatenate((old.weights, new.weights)),
    )


def scenario_config(s: Scenario) -> dict:
    cfg: dict = {"injection_sign": "negative_in_file", "wells": []}
    for w in s.wells:
        entry = {"name": w.name, "role": w.role}
        if w.name in s.p0:
            entry["p0_bar"] = float(s.p0[w.name])
        cfg["wells"].append(entry)
    if s.cumulative_reference:
        cfg["cumulative"] = [
            {"start_days": r.start, "end_days": r.end, "volume_m3": r.volume, "wells": list(r.wells)}
            for r in s.cumulative_reference
        ]
    return cfg


def write_rate_csv(rates: Mapping[str, RateHistory], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["well", "time_days", "rate_m3d"])
        for name, rh in rates.items():
            for t, q in zip(rh.times, rh.rates):
                writer.writerow([name, repr(float(t)), repr(float(q))])


def write_pressure_csv(pressures: Mapping[str, PressureSeries], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["well", "time_days", "pressure_bar", "weight"])
        for name, ps in pressures.items():
            for t, p, w in zip(ps.times, ps.pressures, ps.weights):
                writer.writerow([name, repr(float(t)), repr(float(p)), repr(float(w))])


def write_scenario(s: Scenario, out_dir, stem: str = "scenario") -> tuple[Path, Path, Path]:
    """Write canonical ``<stem>_rates.csv``, ``<stem>_pressures.csv`` and ``<stem>.toml``."""
    import tomli_w

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rate_path = out / f"{stem}_rates.csv"
    pressure_path = out / f"{stem}_pressures.csv"
    config_path = out / f"{stem}.toml"
    write_rate_csv(s.rates, rate_path)
    write_pressure_csv(s.pressures, pressure_path)
    config_path.write_text(tomli_w.dumps(scenario_config(s)), encoding="utf-8")
    return rate_path, pressure_path, config_path


# ---------------------------------------------------------------------------
# quality control


def variation_events(rh: RateHistory, *, threshold: float = VARIATION_THRESHOLD,
                     start: float = 0.0, window: tuple[float, float] | None = None):
    """Count rate steps whose change exceeds ``threshold * max|q|``.

    The opening step of a well that is already flowing when the data start
    (its first step at ``t <= start``) is not an event: no pre-flow pressure
    exists to contrast it with. Returns ``(count, max relative amplitude)``.
    """
    if len(rh) == 0:
        return 0, 0.0
    qmax = rh.max_abs()
    if qmax == 0:
        return 0, 0.0
    rel = np.abs(rh.increments()) / qmax
    keep = np.ones(len(rh), dtype=bool)
    if rh.times[0] <= start:
        keep[0] = False
    if window is not None:
        keep &= (rh.times >= window[0]) & (rh.times < window[1])
    hits = keep & (rel > threshold)
    amp = float(np.max(rel[hits])) if np.any(hits) else 0.0
    return int(np.count_nonzero(hits)), amp


@dataclass(frozen=True)
class WellQc:
    pressure_resolution: float | None
    pressure_resolution_ok: bool | None
    sampling_interval: float | None
    sampling_rate_ok: bool | None
    rate_variation_events: int
    max_relative_amplitude: float
    cumulative_deviation: float | None
    no_variation: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class QcReport:
    wells: Mapping[str, WellQc]
    fatal: tuple[str, ...]
    warnings: tuple[str, ...]
    verdict: str

    @property
    def no_variation(self) -> bool:
        return "no_variation" in self.fatal

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "fatal": list(self.fatal),
            "warnings": list(self.warnings),
            "wells": {k: v.to_dict() for k, v in self.wells.items()},
        }


def qc_report(s: Scenario, *, variation_threshold: float = VARIATION_THRESHOLD,
              window: tuple[float, float] | None = None) -> QcReport:
    """Data-quality flags per well and an overall verdict.

    Fatal: no well shows any rate variation, or no pressure data at all.
    Warnings: coarse pressure resolution (> 1 bar), sparse sampling
    (median interval > 1 hour), group cumulative off by more than 30 %,
    individual wells without rate variation.
    """
    deviations: dict[str, float] = {}
    for rec in s.cumulative_reference:
        dev = abs(group_volume(s.rates, rec) - rec.volume) / rec.volume
        for name in rec.wells:
            deviations[name] = max(deviations.get(name, 0.0), dev)

    per_well = {}
    warnings = []
    any_variation = False
    for name in s.names:
        ps = s.pressures[name]
        res = res_ok = dt = dt_ok = None
        if len(ps) >= 2:
            steps = np.abs(np.diff(ps.pressures))
            nonzero = steps[steps > 0]
            res = float(np.min(nonzero)) if nonzero.size else 0.0
            res_ok = bool(res <= PRESSURE_RESOLUTION_BAR)
            dt = float(np.median(np.diff(ps.times)))
            dt_ok = bool(dt <= SAMPLING_INTERVAL_DAYS * (1 + 1e-9))
            if not res_ok:
                warnings.append(f"{name}: pressure resolution {res:g} bar > {PRESSURE_RESOLUTION_BAR:g}")
            if not dt_ok:
                warnings.append(f"{name}: median sampling interval {dt:g} d > 1 hour")
        count, amp = variation_events(s.rates[name], threshold=variation_threshold, window=window)
        no_var = count == 0
        if not no_var:
            any_variation = True
        elif s.rates[name].max_abs() > 0:
            warnings.append(f"{name}: no rate variation events")
        dev = deviations.get(name)
        if dev is not None and dev > CUMULATIVE_TOLERANCE:
            warnings.append(f"{name}: cumulative deviation {dev:.2f} exceeds {CUMULATIVE_TOLERANCE:.2f}")
        per_well[name] = WellQc(res, res_ok, dt, dt_ok, count, amp, dev, no_var)

    fatal = []
    if not any_variation:
        fatal.append("no_variation")
    if not any(len(ps) for ps in s.pressures.values()):
        fatal.append("no_pressure_data")
    warnings = list(dict.fromkeys(warnings))
    verdict = "fail" if fatal else ("warn" if warnings else "pass")
    return QcReport(per_well, tuple(fatal), tuple(warnings), verdict)


# ---------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class SplitSpec:
    """Training/validation split of the pressure samples.

    ``mode="train-then-validate"``: training is ``t < boundary``, validation
    ``t >= boundary``. ``mode="interval-list"``: training samples fall in one
    of the half-open ``intervals``; validation is the complement.
    """

    boundary: float | None = None
    intervals: tuple[tuple[float, float], ...] = ()
    mode: str = "train-then-validate"

    def __post_init__(self):
        object.__setattr__(self, "intervals", tuple(tuple(map(float, iv)) for iv in self.intervals))
        if self.mode == "train-then-validate":
            if self.boundary is None:
                raise DataError("train-then-validate split needs a boundary")
        elif self.mode == "interval-list":
            if not self.intervals:
                raise DataError("interval-list split needs at least one interval")
            for a, b in self.intervals:
                if not b > a:
                    raise DataError(f"empty split interval [{a}, {b})")
        else:
            raise DataError(f"unknown split mode {self.mode!r}")

    def training_mask(self, times: np.ndarray) -> np.ndarray:
        times = np.asarray(times, dtype=float)
        if self.mode == "train-then-validate":
            return times < self.boundary
        mask = np.zeros(times.shape, dtype=bool)
        for a, b in self.intervals:
            mask |= (times >= a) & (times < b)
        return mask

    def to_dict(self) -> dict:
        return {"mode": self.mode, "boundary": self.boundary, "intervals": [list(iv) for iv in self.intervals]}


def split_dataset(s: Scenario, spec: SplitSpec) -> tuple[Scenario, Scenario]:
    """Partition pressure samples; both halves keep the full rate histories."""
    train, valid = {}, {}
    n_train = n_valid = 0
    for name, ps in s.pressures.items():
        mask = spec.training_mask(ps.times)
        train[name] = ps.select(mask)
        valid[name] = ps.select(~mask)
        n_train += int(mask.sum())
        n_valid += int((~mask).sum())
    if n_train == 0:
        raise DataError("split leaves the training partition empty")
    if n_valid == 0:
        raise DataError("split leaves the validation partition empty")
    return s.with_pressures(train), s.with_pressures(valid)


def pressure_span(s: Scenario) -> tuple[float, float] | None:
    lo, hi = math.inf, -math.inf
    for ps in s.pressures.values():
        if len(ps):
            lo = min(lo, float(ps.times[0]))
            hi = max(hi, float(ps.times[-1]))
    if lo == math.inf:
        return None
    return lo, hi
