"""Household demand and PV availability time series."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import ParameterError

N_BASE_PROFILES = 30
DEFAULT_DAY = datetime(2012, 1, 16)


def _clock(hhmm: str) -> timedelta:
    h, m = hhmm.split(":")
    return timedelta(hours=int(h), minutes=int(m))


@dataclass
class TimeSeries:
    start: datetime
    step: float  # seconds
    values: np.ndarray  # kW

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.step <= 0:
            raise ParameterError("time series step must be positive")
        if not np.all(np.isfinite(self.values)):
            raise ParameterError("time series values must be finite")

    def __len__(self):
        return len(self.values)

    def times(self) -> list[datetime]:
        return [self.start + timedelta(seconds=k * self.step) for k in range(len(self.values))]

    def offsets(self) -> np.ndarray:
        """Seconds since ``start`` for every sample."""
        return np.arange(len(self.values)) * self.step


@dataclass(frozen=True)
class DayProfileSpec:
    season: str = "summer"
    mean_load_kw: float = 0.77
    std_load_kw: float = 0.27
    pv_peak_kw: float = 5.0
    window_start: str = "08:00"
    window_end: str = "19:30"
    day: datetime = field(default=DEFAULT_DAY)

    def __post_init__(self):
        if self.season not in ("summer", "winter"):
            raise ParameterError(f"season must be summer or winter, got {self.season!r}")
        if not (0 <= self.pv_peak_kw <= 5.0):
            raise ParameterError("pv_peak_kw must lie in [0, 5] kW (inverter AC limit)")
        if self.mean_load_kw < 0 or self.std_load_kw < 0:
            raise ParameterError("load statistics must be non-negative")
        lo, hi = _clock(self.window_start), _clock(self.window_end)
        if not (_clock("08:00") <= lo < hi <= _clock("19:30")):
            raise ParameterError("daylight window must lie within 08:00-19:30")

    @classmethod
    def summer(cls, **kw) -> "DayProfileSpec":
        return cls(season="summer", mean_load_kw=0.77, std_load_kw=0.27, pv_peak_kw=5.0, **kw)

    @classmethod
    def winter(cls, **kw) -> "DayProfileSpec":
        # winter clear-sky irradiation about 30% below summer
        return cls(season="winter", mean_load_kw=0.83, std_load_kw=0.53, pv_peak_kw=3.5, **kw)

    @property
    def start(self) -> datetime:
        return self.day + _clock(self.window_start)

    @property
    def duration_s(self) -> float:
        return (_clock(self.window_end) - _clock(self.window_start)).total_seconds()


def upsample_spline(series: TimeSeries, target_step: float, clamp_negative: bool = True) -> TimeSeries:
    """Natural cubic spline through the samples of ``series`` on a finer grid."""
    if len(series) < 4:
        raise ParameterError("spline upsampling needs at least 4 samples")
    ratio = series.step / target_step
    if target_step <= 0 or abs(ratio - round(ratio)) > 1e-9:
        raise ParameterError(f"target step {target_step} s must divide the input step {series.step} s")
    ratio = int(round(ratio))
    knots = series.offsets()
    spline = CubicSpline(knots, series.values, bc_type="natural")
    grid = np.arange((len(series) - 1) * ratio + 1) * float(target_step)
    values = spline(grid)
    values[::ratio] = series.values  # exact at the knots
    if clamp_negative:
        values = np.maximum(values, 0.0)
    return TimeSeries(series.start, float(target_step), values)


def _diurnal_shape(hours: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance daytime demand shape: morning shoulder, midday trough, evening peak."""
    raw = 0.35 * np.exp(-(((hours - 8.5) / 1.2) ** 2)) + 1.0 * np.exp(-(((hours - 18.8) / 1.6) ** 2))
    raw = raw - raw.mean()
    return raw / raw.std()


def _lognormal_unit_mean(rng, cv2: float, size=None):
    if cv2 <= 0:
        return np.ones(size) if size is not None else 1.0
    sigma2 = np.log1p(cv2)
    return rng.lognormal(-0.5 * sigma2, np.sqrt(sigma2), size=size)


def synth_load_day(
    spec: DayProfileSpec,
    household_index: int,
    seed: int,
    step: float = 30.0,
    shape_share: float = 0.3,
    household_share: float = 0.5,
) -> TimeSeries:
    """Synthetic daytime demand for one household.

    A diurnal base shape is scaled by a per-household lognormal factor and
    per-sample lognormal noise so that the pooled mean and standard deviation
    over many households match ``spec``. ``shape_share`` and
    ``household_share`` split the relative variance between the shape, the
    household factor, and the remaining sample noise. The half-hourly draws are
    then spline-upsampled to ``step`` seconds.
    """
    rng = np.random.default_rng([int(seed), int(household_index)])
    n_knots = int(spec.duration_s // 1800) + 1
    hours = (spec.start - spec.day).total_seconds() / 3600 + 0.5 * np.arange(n_knots)
    mean = spec.mean_load_kw
    cv2 = (spec.std_load_kw / mean) ** 2 if mean > 0 else 0.0
    # (1 + a^2)(1 + cv_h^2)(1 + cv_e^2) = 1 + cv^2, split in log space
    budget = np.log1p(cv2)
    a2 = np.expm1(shape_share * budget)
    cv_h2 = np.expm1(household_share * budget)
    cv_e2 = np.expm1(max(1.0 - shape_share - household_share, 0.0) * budget)
    shape = 1.0 + np.sqrt(a2) * _diurnal_shape(hours)
    shape = np.maximum(shape, 0.05)
    knots = mean * shape * _lognormal_unit_mean(rng, cv_h2) * _lognormal_unit_mean(rng, cv_e2, n_knots)
    return upsample_spline(TimeSeries(spec.start, 1800.0, knots), step)


def synth_pv_day(spec: DayProfileSpec, seed: int | None = None, step: float = 30.0) -> TimeSeries:
    """Clear-sky AC output of one PV system: a smooth bell between the window edges.

    The clear-sky curve is deterministic; ``seed`` is accepted so every profile
    generator shares one call signature.
    """
    del seed
    n = int(round(spec.duration_s / step)) + 1
    frac = np.arange(n) * step / spec.duration_s
    values = spec.pv_peak_kw * np.sin(np.pi * np.clip(frac, 0.0, 1.0)) ** 2
    values[0] = values[-1] = 0.0
    return TimeSeries(spec.start, float(step), values)


def allocate_households(profiles, node_ids) -> dict:
    """Node ``n`` receives base profile ``n mod 30``."""
    profiles = list(profiles)
    if len(profiles) != N_BASE_PROFILES:
        raise ParameterError(f"exactly {N_BASE_PROFILES} base profiles required, got {len(profiles)}")
    return {int(n): profiles[int(n) % N_BASE_PROFILES] for n in node_ids}


def reactive_demand(p_kw, power_factor: float = 0.95, leading: bool = True):
    """Reactive consumption for a constant power factor; a leading load consumes negative vars."""
    if not (0 < power_factor <= 1):
        raise ParameterError("power factor must lie in (0, 1]")
    q = np.asarray(p_kw) * np.tan(np.arccos(power_factor))
    return -q if leading else q


def load_ami_csv(path, target_step: float = 30.0) -> dict:
    """Read ``timestamp,household_id,kw`` rows at 30-minute cadence; return upsampled series per household."""
    rows = defaultdict(list)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"timestamp", "household_id", "kw"} - set(reader.fieldnames or [])
        if missing:
            raise ParameterError(f"AMI CSV is missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                rows[row["household_id"]].append((datetime.fromisoformat(row["timestamp"]), float(row["kw"])))
            except ValueError as exc:
                raise ParameterError(f"{path}:{lineno}: {exc}") from exc
    out = {}
    for hh, samples in rows.items():
        samples.sort()
        times = [t for t, _ in samples]
        steps = {(b - a).total_seconds() for a, b in zip(times, times[1:])}
        if steps != {1800.0}:
            raise ParameterError(f"household {hh}: expected a regular 30-minute cadence")
        series = TimeSeries(times[0], 1800.0, [v for _, v in samples])
        out[hh] = upsample_spline(series, target_step)
    return out
