"""Ensemble sources (seeded synthetic generator, CSV files) and train/test splits."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .timeseries import (CalendarDay, ForecastEnsemble, ImpactSeries, date_range,
                         days_between, horizon_for)

ENSEMBLE_COLUMNS = ("member_id", "date", "temperature_c", "precipitation_mm")
IMPACT_COLUMNS = ("member_id", "date", "r0")


class DataFormatError(ValueError):
    """Malformed input file; ``row`` is the 1-based line number when known."""

    def __init__(self, message, path=None, row=None):
        self.path = str(path) if path is not None else None
        self.row = row
        where = ""
        if self.path:
            where = f"{self.path}"
            if row is not None:
                where += f":{row}"
            where += ": "
        super().__init__(where + message)


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 20210101
    n_members: int = 50
    temp_annual_mean: float = 19.0
    temp_annual_amplitude: float = 3.0
    temp_peak_day: int = 60
    temp_ar1_coeff: float = 0.8
    temp_noise_sd: float = 1.2
    member_bias_sd: float = 0.5
    rain_season_peaks: tuple = (105, 315)
    rain_peak_mean: float = 8.0
    rain_base_mean: float = 0.8
    rain_season_width_days: float = 30.0
    rain_dispersion: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "rain_season_peaks", tuple(int(d) for d in self.rain_season_peaks))
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.n_members < 1:
            raise ValueError("n_members must be >= 1")
        if not 0 <= self.temp_ar1_coeff < 1:
            raise ValueError("temp_ar1_coeff must lie in [0, 1)")
        for name in ("temp_annual_amplitude", "temp_noise_sd", "member_bias_sd", "rain_peak_mean",
                     "rain_base_mean", "rain_season_width_days", "rain_dispersion"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0")
        if not math.isfinite(self.temp_annual_mean):
            raise ValueError("temp_annual_mean must be finite")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def member_seed(seed: int, start: CalendarDay, member_id: int) -> np.random.SeedSequence:
    """Independent per-member stream: every member can be generated on its own."""
    return np.random.SeedSequence([int(seed), start.year, start.month, start.day, int(member_id)])


def _circular_distance(doy: np.ndarray, centre: float, period: float = 365.25) -> np.ndarray:
    d = np.abs(doy - centre) % period
    return np.minimum(d, period - d)


def temperature_climatology(cfg: SynthConfig, doy: np.ndarray) -> np.ndarray:
    phase = 2.0 * np.pi * (doy - cfg.temp_peak_day) / 365.25
    return cfg.temp_annual_mean + cfg.temp_annual_amplitude * np.cos(phase)


def rain_intensity(cfg: SynthConfig, doy: np.ndarray) -> np.ndarray:
    """Mean daily rainfall: a flat base plus one Gaussian bump per rainy season."""
    bumps = np.zeros_like(doy, dtype=np.float64)
    if cfg.rain_season_width_days > 0:
        for peak in cfg.rain_season_peaks:
            d = _circular_distance(doy, peak)
            bumps += np.exp(-0.5 * (d / cfg.rain_season_width_days) ** 2)
    return cfg.rain_base_mean + (cfg.rain_peak_mean - cfg.rain_base_mean) * np.minimum(bumps, 1.0)


def _ar1(rng: np.random.Generator, n: int, coeff: float, sd: float) -> np.ndarray:
    shocks = rng.standard_normal(n) * sd
    out = np.empty(n)
    out[0] = shocks[0] / math.sqrt(1.0 - coeff * coeff)
    for i in range(1, n):
        out[i] = coeff * out[i - 1] + shocks[i]
    return out


def synthesize_member(cfg: SynthConfig, start: CalendarDay, member_id: int, doy: np.ndarray):
    rng = np.random.default_rng(member_seed(cfg.seed, start, member_id))
    n = doy.shape[0]
    bias = rng.standard_normal() * cfg.member_bias_sd
    temp = temperature_climatology(cfg, doy) + bias + _ar1(rng, n, cfg.temp_ar1_coeff, cfg.temp_noise_sd)
    sigma = cfg.rain_dispersion
    log_noise = _ar1(rng, n, cfg.temp_ar1_coeff, sigma * math.sqrt(1.0 - cfg.temp_ar1_coeff ** 2))
    rain = np.maximum(0.0, rain_intensity(cfg, doy) * np.exp(log_noise - 0.5 * sigma * sigma))
    return temp, rain


def synthesize_ensemble(cfg: SynthConfig, start: CalendarDay) -> ForecastEnsemble:
    """Seeded synthetic seasonal ensemble for the half-year beginning at ``start``.

    Temperature is a seasonal cosine plus a constant per-member bias plus AR(1)
    noise. Rainfall is a bimodal seasonal intensity times mean-one lognormal
    noise whose log follows an AR(1) with the temperature coefficient and
    stationary standard deviation ``rain_dispersion``.
    """
    h = horizon_for(start)
    doy = np.array([d.day_of_year for d in date_range(start, h)], dtype=np.float64)
    ids = np.arange(1, cfg.n_members + 1)
    temp = np.empty((cfg.n_members, h))
    rain = np.empty((cfg.n_members, h))
    for j, mid in enumerate(ids):
        temp[j], rain[j] = synthesize_member(cfg, start, int(mid), doy)
    return ForecastEnsemble(start, ids, temp, rain)


# --- CSV I/O -----------------------------------------------------------------

def _read_rows(path, columns):
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataFormatError(f"cannot open file ({exc.strerror})", path) from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataFormatError("empty file, header required", path, 1)
        header = [h.strip() for h in header]
        missing = [c for c in columns if c not in header]
        if missing:
            raise DataFormatError(f"missing columns: {', '.join(missing)}", path, 1)
        idx = [header.index(c) for c in columns]
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            try:
                yield lineno, [rec[i] for i in idx]
            except IndexError:
                raise DataFormatError("too few fields", path, lineno) from None


def _parse_member_table(path, columns, value_check):
    """Parse a ``member_id,date,<values...>`` table into per-member date-sorted arrays."""
    per_member: dict[int, dict[CalendarDay, tuple]] = {}
    first_row: dict[tuple, int] = {}
    for lineno, rec in _read_rows(path, columns):
        try:
            mid = int(rec[0])
            day = CalendarDay.parse(rec[1])
            vals = tuple(float(v) for v in rec[2:])
        except ValueError as exc:
            raise DataFormatError(f"unparseable value ({exc})", path, lineno) from None
        problem = value_check(vals)
        if problem:
            raise DataFormatError(problem, path, lineno)
        key = (mid, day)
        if key in first_row:
            raise DataFormatError(f"duplicate (member {mid}, date {day}); first seen on line "
                                  f"{first_row[key]}", path, lineno)
        first_row[key] = lineno
        per_member.setdefault(mid, {})[day] = vals
    if not per_member:
        raise DataFormatError("no data rows", path)

    ids = sorted(per_member)
    starts, lengths = set(), set()
    for mid in ids:
        days = sorted(per_member[mid])
        for a, b in zip(days, days[1:]):
            if days_between(a, b) != 1:
                raise DataFormatError(f"member {mid}: dates not contiguous, gap between {a} and {b}",
                                      path, first_row[(mid, b)])
        starts.add(days[0])
        lengths.add(len(days))
    if len(starts) != 1 or len(lengths) != 1:
        raise DataFormatError("members cover different date ranges", path)
    start = starts.pop()
    values = np.array([[per_member[mid][d] for d in sorted(per_member[mid])] for mid in ids])
    return start, np.array(ids), values


def _check_weather(vals):
    t, p = vals
    if not math.isfinite(t):
        return "temperature must be finite"
    if not (p >= 0 and math.isfinite(p)):
        return f"negative or non-finite precipitation {p}"
    return None


def _check_r0(vals):
    (r,) = vals
    if not (r >= 0 and math.isfinite(r)):
        return f"R0 must be finite and >= 0, got {r}"
    return None


def load_ensemble_csv(path) -> ForecastEnsemble:
    start, ids, values = _parse_member_table(path, ENSEMBLE_COLUMNS, _check_weather)
    return ForecastEnsemble(start, ids, values[:, :, 0], values[:, :, 1])


def write_ensemble_csv(ensemble: ForecastEnsemble, path) -> None:
    dates = [d.isoformat() for d in ensemble.dates]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(ENSEMBLE_COLUMNS) + "\n")
        for j, mid in enumerate(ensemble.member_ids):
            for i, d in enumerate(dates):
                fh.write(f"{mid},{d},{ensemble.temperature[j, i]:.6f},"
                         f"{ensemble.precipitation[j, i]:.6f}\n")


def load_impact_csv(path) -> tuple[CalendarDay, list[ImpactSeries]]:
    start, ids, values = _parse_member_table(path, IMPACT_COLUMNS, _check_r0)
    return start, [ImpactSeries(int(m), values[j, :, 0]) for j, m in enumerate(ids)]


def write_impact_csv(start: CalendarDay, impacts: list[ImpactSeries], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(IMPACT_COLUMNS) + "\n")
        for s in sorted(impacts, key=lambda s: s.member_id):
            for d, v in zip(date_range(start, len(s)), s.values):
                fh.write(f"{s.member_id},{d.isoformat()},{v:.6f}\n")


# --- dataset splits ----------------------------------------------------------

@dataclass(eq=False)
class PeriodData:
    """One forecast period: its weather ensemble and the matching R0 series."""

    ensemble: ForecastEnsemble
    impacts: list[ImpactSeries]

    def __post_init__(self):
        by_id = {s.member_id: s for s in self.impacts}
        ordered = []
        for mid in self.ensemble.member_ids:
            s = by_id.get(int(mid))
            if s is None:
                raise ValueError(f"no impact series for member {mid}")
            if len(s) != self.ensemble.horizon_days:
                raise ValueError(f"member {mid}: impact length {len(s)} != horizon "
                                 f"{self.ensemble.horizon_days}")
            ordered.append(s)
        self.impacts = ordered

    @property
    def start(self) -> CalendarDay:
        return self.ensemble.start

    @property
    def r0(self) -> np.ndarray:
        return np.stack([s.values for s in self.impacts])

    @property
    def n_rows(self) -> int:
        return self.ensemble.n_members * self.ensemble.horizon_days

    def select(self, member_ids) -> "PeriodData":
        ids = {int(m) for m in member_ids}
        return PeriodData(self.ensemble.select(sorted(ids)),
                          [s for s in self.impacts if s.member_id in ids])


@dataclass(eq=False)
class DatasetSplit:
    label: str
    train: list[PeriodData] = field(default_factory=list)
    test: list[PeriodData] = field(default_factory=list)

    @property
    def n_train_rows(self) -> int:
        return sum(p.n_rows for p in self.train)

    @property
    def n_test_rows(self) -> int:
        return sum(p.n_rows for p in self.test)

    def keys(self, part: str) -> set[tuple[int, CalendarDay]]:
        """(member_id, date) rows of the ``train`` or ``test`` part."""
        out = set()
        for p in getattr(self, part):
            for mid in p.ensemble.member_ids:
                out.update((int(mid), d) for d in p.ensemble.dates)
        return out


N_ENSEMBLE_MEMBERS = 50
DATASET1_TRAIN_MEMBERS = 35


def build_dataset1(ensemble: ForecastEnsemble, impacts: list[ImpactSeries]) -> DatasetSplit:
    """Single period; members 1-35 train, members 36-50 test."""
    if ensemble.n_members != N_ENSEMBLE_MEMBERS:
        raise ValueError(f"dataset1 needs {N_ENSEMBLE_MEMBERS} members, got {ensemble.n_members}")
    period = PeriodData(ensemble, impacts)
    ids = sorted(int(m) for m in ensemble.member_ids)
    return DatasetSplit("dataset1",
                        train=[period.select(ids[:DATASET1_TRAIN_MEMBERS])],
                        test=[period.select(ids[DATASET1_TRAIN_MEMBERS:])])


DATASET2_TRAIN_YEARS = (2017, 2018, 2019, 2020)
DATASET2_TEST_YEAR = 2021


def dataset2_starts() -> list[CalendarDay]:
    years = DATASET2_TRAIN_YEARS + (DATASET2_TEST_YEAR,)
    return [CalendarDay(y, m, 1) for y in years for m in (1, 7)]


def build_dataset2(periods: list[PeriodData]) -> DatasetSplit:
    """January/July periods 2017-2020 train, the two 2021 periods test."""
    by_start = {}
    for p in periods:
        if p.start in by_start:
            raise ValueError(f"duplicate period starting {p.start}")
        by_start[p.start] = p
    missing = [str(s) for s in dataset2_starts() if s not in by_start]
    if missing:
        raise ValueError(f"dataset2 is missing periods starting {', '.join(missing)}")
    counts = {p.ensemble.n_members for p in by_start.values()}
    if counts != {N_ENSEMBLE_MEMBERS}:
        raise ValueError(f"dataset2 needs {N_ENSEMBLE_MEMBERS} members in every period, got {sorted(counts)}")
    starts = dataset2_starts()
    return DatasetSplit("dataset2",
                        train=[by_start[s] for s in starts if s.year != DATASET2_TEST_YEAR],
                        test=[by_start[s] for s in starts if s.year == DATASET2_TEST_YEAR])


# --- split manifests ---------------------------------------------------------

MANIFEST_VERSION = 1


def write_split_manifest(split: DatasetSplit, sources: dict, path) -> None:
    """``sources`` maps a period start to its ``(ensemble_csv, impact_csv)`` paths."""
    base = Path(path).resolve().parent

    def part(periods):
        out = []
        for p in periods:
            ens, imp = sources[p.start]
            out.append({"start": p.start.isoformat(),
                        "ensemble_csv": os.path.relpath(Path(ens).resolve(), base),
                        "impact_csv": os.path.relpath(Path(imp).resolve(), base),
                        "member_ids": [int(m) for m in p.ensemble.member_ids]})
        return out

    doc = {"format_version": MANIFEST_VERSION, "label": split.label,
           "train": part(split.train), "test": part(split.test)}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_split_manifest(path) -> DatasetSplit:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"cannot read split manifest ({exc})", path) from None
    if doc.get("format_version") != MANIFEST_VERSION:
        raise DataFormatError(f"unsupported manifest version {doc.get('format_version')!r}", path)
    cache = {}

    def period(entry):
        key = (entry["ensemble_csv"], entry["impact_csv"])
        if key not in cache:
            ens = load_ensemble_csv(path.parent / entry["ensemble_csv"])
            start, impacts = load_impact_csv(path.parent / entry["impact_csv"])
            if start != ens.start:
                raise DataFormatError(f"impact file starts {start}, ensemble starts {ens.start}",
                                      path.parent / entry["impact_csv"])
            cache[key] = PeriodData(ens, impacts)
        p = cache[key]
        if p.start.isoformat() != entry["start"]:
            raise DataFormatError(f"manifest start {entry['start']} != file start {p.start}", path)
        return p.select(entry["member_ids"])

    try:
        return DatasetSplit(doc["label"], train=[period(e) for e in doc["train"]],
                            test=[period(e) for e in doc["test"]])
    except KeyError as exc:
        raise DataFormatError(f"manifest missing key {exc.args[0]!r}", path) from None
