"""Soil time-series ingestion, cleaning, synthesis and path-loss conversion."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from typing import IO, Union

import numpy as np
from scipy.signal import lfilter

from .channel import DielectricState, LinkGeometry, path_loss_db
from .errors import InvalidConfigError, SchemaError, TimingError, UnrecoverableDataError

MISSING_TOKENS = {"", "nan", "na", "null"}
DEFAULT_START = datetime(2017, 1, 1)


@dataclass(frozen=True)
class CsvSchema:
    """Column mapping for soil CSV files.

    ``time_is_index`` treats the time column as a sample counter instead of a
    timestamp. ``sigma_scale`` converts the conductivity column to S/m
    (0.1 for mS/cm).
    """

    timestamp: str = "timestamp"
    epsilon: str = "permittivity"
    sigma: str = "conductivity"
    step: float = 600.0
    time_is_index: bool = False
    sigma_scale: float = 1.0


SERIES_SCHEMA = CsvSchema(timestamp="t_index", epsilon="epsilon", sigma="sigma", time_is_index=True)


@dataclass(eq=False)
class SoilTimeSeries:
    """Uniformly sampled permittivity / conductivity readings; NaN marks a missing value."""

    epsilon: np.ndarray
    sigma: np.ndarray
    start_time: datetime = DEFAULT_START
    step: float = 600.0

    def __post_init__(self):
        self.epsilon = np.asarray(self.epsilon, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        if self.epsilon.shape != self.sigma.shape or self.epsilon.ndim != 1:
            raise InvalidConfigError("epsilon and sigma must be 1-D and of equal length")
        if len(self.epsilon) < 2:
            raise InvalidConfigError("a series needs at least 2 samples")
        if not self.step > 0:
            raise InvalidConfigError("step must be positive")

    def __len__(self):
        return len(self.epsilon)

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.epsilon) | np.isnan(self.sigma)

    @property
    def is_clean(self) -> bool:
        return bool(
            not np.isnan(self.epsilon).any()
            and not np.isnan(self.sigma).any()
            and (self.epsilon >= 1).all()
            and (self.sigma >= 0).all()
        )

    def timestamps(self) -> list[datetime]:
        return [self.start_time + timedelta(seconds=i * self.step) for i in range(len(self))]

    def equals(self, other: "SoilTimeSeries") -> bool:
        return (
            self.step == other.step
            and self.start_time == other.start_time
            and np.array_equal(self.epsilon, other.epsilon, equal_nan=True)
            and np.array_equal(self.sigma, other.sigma, equal_nan=True)
        )


# A cleaned series is the same container with the is_clean invariant holding.
CleanedSeries = SoilTimeSeries


@dataclass(eq=False)
class PathLossTrace:
    pl: np.ndarray
    delta: np.ndarray
    geometry: LinkGeometry = field(default_factory=LinkGeometry)

    def __len__(self):
        return len(self.pl)

    def observations(self) -> np.ndarray:
        """(T, 2) array of (path loss, path-loss change) rows for the HMM."""
        return np.column_stack([self.pl, self.delta])

    @classmethod
    def from_pl(cls, pl, geometry: LinkGeometry | None = None) -> "PathLossTrace":
        pl = np.asarray(pl, dtype=float)
        delta = np.zeros_like(pl)
        delta[1:] = np.diff(pl)
        return cls(pl, delta, geometry or LinkGeometry())


# ---------------------------------------------------------------- ingestion

def _parse_float(text: str) -> float:
    if text.strip().lower() in MISSING_TOKENS:
        return math.nan
    try:
        return float(text)
    except ValueError:
        return math.nan


def _parse_time(text: str, line: int) -> Union[datetime, float]:
    text = text.strip()
    try:
        return float(text)
    except ValueError:
        pass
    try:
        return datetime.fromisoformat(text)
    except ValueError:
        raise TimingError(f"unparseable timestamp {text!r}", line) from None


def parse_csv(raw: Union[bytes, str, IO], schema: CsvSchema = CsvSchema()) -> SoilTimeSeries:
    """Read a soil CSV (UTF-8, header row) into a :class:`SoilTimeSeries`.

    Empty or unparseable numeric cells become missing values. Rows must be
    spaced exactly ``schema.step`` seconds apart; the first offending row
    (1-based file line, header is line 1) is reported in a
    :class:`TimingError`.
    """
    if hasattr(raw, "read"):
        raw = raw.read()
    if isinstance(raw, bytes):
        raw = raw.decode("utf-8")
    raw = io.StringIO(raw)
    reader = csv.DictReader(raw)
    needed = [schema.timestamp, schema.epsilon, schema.sigma]
    header = reader.fieldnames or []
    absent = [c for c in needed if c not in header]
    if absent:
        raise SchemaError(f"missing required columns {absent}; found {header}")

    times, eps, sig = [], [], []
    for line, row in enumerate(reader, start=2):
        times.append(_parse_time(row[schema.timestamp] or "", line))
        eps.append(_parse_float(row[schema.epsilon] or ""))
        sig.append(_parse_float(row[schema.sigma] or "") * schema.sigma_scale)

    if len(times) < 2:
        raise InvalidConfigError("a series needs at least 2 rows")
    kinds = {type(t) for t in times}
    if len(kinds) > 1:
        raise TimingError("mixed numeric and calendar timestamps", 2)

    if isinstance(times[0], datetime):
        seconds = [(t - times[0]).total_seconds() for t in times]
        start = times[0]
    else:
        scale = schema.step if schema.time_is_index else 1.0
        seconds = [(t - times[0]) * scale for t in times]
        start = DEFAULT_START
    for i in range(1, len(seconds)):
        gap = seconds[i] - seconds[i - 1]
        if gap <= 0:
            raise TimingError("timestamp is duplicated or not increasing", i + 2)
        if abs(gap - schema.step) > 1e-6 * schema.step:
            raise TimingError(f"gap of {gap:g} s does not match step {schema.step:g} s", i + 2)
    return SoilTimeSeries(np.array(eps), np.array(sig), start_time=start, step=schema.step)


def _fmt(x: float) -> str:
    return "" if math.isnan(x) else format(x, ".17g")


def write_series_csv(series: SoilTimeSeries, out: IO[str], *, calendar: bool = False) -> None:
    """Write a series; ``calendar`` selects the portal-style timestamp layout."""
    w = csv.writer(out, lineterminator="\n")
    if calendar:
        w.writerow(["timestamp", "permittivity", "conductivity"])
        for t, e, s in zip(series.timestamps(), series.epsilon, series.sigma):
            w.writerow([t.isoformat(), _fmt(e), _fmt(s)])
    else:
        w.writerow(["t_index", "epsilon", "sigma"])
        for i, (e, s) in enumerate(zip(series.epsilon, series.sigma)):
            w.writerow([i, _fmt(e), _fmt(s)])


def write_trace_csv(trace: PathLossTrace, out: IO[str]) -> None:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["t_index", "pl_db", "delta_db"])
    for i, (p, d) in enumerate(zip(trace.pl, trace.delta)):
        w.writerow([i, _fmt(p), _fmt(d)])


def read_trace_csv(raw: Union[str, IO], geometry: LinkGeometry | None = None) -> PathLossTrace:
    if isinstance(raw, str):
        raw = io.StringIO(raw)
    reader = csv.DictReader(raw)
    if not {"pl_db", "delta_db"} <= set(reader.fieldnames or []):
        raise SchemaError("trace CSV needs pl_db and delta_db columns")
    pl, delta = [], []
    for row in reader:
        pl.append(float(row["pl_db"]))
        delta.append(float(row["delta_db"]))
    return PathLossTrace(np.array(pl), np.array(delta), geometry or LinkGeometry())


# ----------------------------------------------------------------- cleaning

def _fill(values: np.ndarray, name: str) -> np.ndarray:
    ok = ~np.isnan(values)
    if not ok.any():
        raise UnrecoverableDataError(f"every {name} value is missing")
    if ok.all():
        return values.copy()
    idx = np.arange(len(values))
    # np.interp holds the end values constant outside the known range
    return np.interp(idx, idx[ok], values[ok])


def clean(s: SoilTimeSeries) -> CleanedSeries:
    """Clamp unphysical readings and fill gaps.

    Permittivity below 1 becomes 1, negative conductivity becomes 0. Interior
    gaps are linearly interpolated; leading and trailing gaps take the nearest
    valid value.
    """
    eps = np.where(s.epsilon < 1, 1.0, s.epsilon)
    sig = np.where(s.sigma < 0, 0.0, s.sigma)
    return SoilTimeSeries(_fill(eps, "permittivity"), _fill(sig, "conductivity"), s.start_time, s.step)


def to_pathloss_trace(s: CleanedSeries, g: LinkGeometry) -> PathLossTrace:
    pl = np.asarray(path_loss_db(DielectricState(s.epsilon, s.sigma), g), dtype=float)
    return PathLossTrace.from_pl(pl, g)


# ---------------------------------------------------------------- synthesis

@dataclass(frozen=True)
class ProcessConfig:
    """One soil quantity: base + yearly and daily sinusoids + rain jumps + AR(1) noise."""

    base: float
    seasonal_amp: float = 0.0
    seasonal_peak_day: float = 0.0
    daily_amp: float = 0.0
    daily_peak_hour: float = 14.0
    event_rate_per_day: float = 0.0
    jump_mean: float = 0.0
    decay_hours: float = 12.0
    ar_coef: float = 0.95
    noise_scale: float = 0.0
    floor: float = 0.0

    def generate(self, n: int, step: float, rng: np.random.Generator) -> np.ndarray:
        t = np.arange(n) * step
        day = 86400.0
        out = np.full(n, float(self.base))
        out += self.seasonal_amp * np.cos(2 * np.pi * (t / day - self.seasonal_peak_day) / 365.0)
        out += self.daily_amp * np.cos(2 * np.pi * (t / 3600.0 - self.daily_peak_hour) / 24.0)
        # rain events: Poisson counts with exponential sizes, decaying exponentially
        p_event = self.event_rate_per_day * step / day
        counts = rng.poisson(p_event, n)
        sizes = np.where(counts > 0, rng.exponential(max(self.jump_mean, 0.0), n) * counts, 0.0)
        decay = math.exp(-step / (self.decay_hours * 3600.0))
        out += lfilter([1.0], [1.0, -decay], sizes)
        innov = rng.standard_normal(n) * self.noise_scale
        out += lfilter([1.0], [1.0, -self.ar_coef], innov)
        return np.maximum(out, self.floor)


# Calibrated so the default link sees a ~25 dB yearly path-loss swing in the
# 80-105 dB band, where -100 dBm noise and 1 mW-100 mW powers bite.
DEFAULT_EPSILON = ProcessConfig(
    base=12.0, seasonal_amp=6.0, seasonal_peak_day=190.0, daily_amp=0.4,
    event_rate_per_day=0.08, jump_mean=4.0, decay_hours=36.0,
    ar_coef=0.98, noise_scale=0.05, floor=1.0,
)
DEFAULT_SIGMA = ProcessConfig(
    base=1.25, seasonal_amp=0.45, seasonal_peak_day=120.0, daily_amp=0.02,
    event_rate_per_day=0.1, jump_mean=0.3, decay_hours=6.0,
    ar_coef=0.98, noise_scale=0.004, floor=0.0,
)


@dataclass(frozen=True)
class SynthConfig:
    epsilon: ProcessConfig = DEFAULT_EPSILON
    sigma: ProcessConfig = DEFAULT_SIGMA
    length: int = 52560
    step: float = 600.0
    start_time: datetime = DEFAULT_START


def synth_generate(cfg: SynthConfig = SynthConfig(), seed: int = 0) -> SoilTimeSeries:
    """Deterministic synthetic soil year; permittivity and conductivity are independent."""
    if cfg.length < 2:
        raise InvalidConfigError("length must be at least 2")
    if not cfg.step > 0:
        raise InvalidConfigError("step must be positive")
    eps_rng, sig_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    eps = cfg.epsilon.generate(cfg.length, cfg.step, eps_rng)
    sig = cfg.sigma.generate(cfg.length, cfg.step, sig_rng)
    return SoilTimeSeries(eps, sig, cfg.start_time, cfg.step)


def synth_config_from_dict(d: dict) -> SynthConfig:
    base = SynthConfig()
    kw = {}
    for name in ("epsilon", "sigma"):
        if name in d:
            kw[name] = replace(getattr(base, name), **d[name])
    for name in ("length", "step"):
        if name in d:
            kw[name] = type(getattr(base, name))(d[name])
    return replace(base, **kw)


def pl_swing(trace: PathLossTrace) -> float:
    return float(np.max(trace.pl) - np.min(trace.pl))
