"""Calendar arithmetic and the shared ensemble/impact value types."""

from __future__ import annotations

import datetime as _dt
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True, order=True)
class CalendarDay:
    """A Gregorian date stored as an explicit (year, month, day) triple."""

    year: int
    month: int
    day: int

    def __post_init__(self):
        # raises ValueError on an invalid date
        _dt.date(self.year, self.month, self.day)

    @classmethod
    def from_date(cls, d: _dt.date) -> "CalendarDay":
        return cls(d.year, d.month, d.day)

    @classmethod
    def parse(cls, text: str) -> "CalendarDay":
        return cls.from_date(_dt.date.fromisoformat(text.strip()))

    def to_date(self) -> _dt.date:
        return _dt.date(self.year, self.month, self.day)

    def isoformat(self) -> str:
        return f"{self.year:04d}-{self.month:02d}-{self.day:02d}"

    def __str__(self) -> str:
        return self.isoformat()

    @property
    def day_of_year(self) -> int:
        return self.to_date().timetuple().tm_yday


def date_add(day: CalendarDay, offset: int) -> CalendarDay:
    return CalendarDay.from_date(day.to_date() + _dt.timedelta(days=int(offset)))


def date_range(start: CalendarDay, n_days: int) -> list[CalendarDay]:
    d0 = start.to_date()
    return [CalendarDay.from_date(d0 + _dt.timedelta(days=i)) for i in range(n_days)]


def days_between(a: CalendarDay, b: CalendarDay) -> int:
    """Signed number of days from ``a`` to ``b``."""
    return (b.to_date() - a.to_date()).days


def is_half_year_start(day: CalendarDay) -> bool:
    return day.day == 1 and day.month in (1, 7)


def horizon_for(start: CalendarDay) -> int:
    """Length in days of the calendar half-year that begins at ``start``.

    Only January 1 and July 1 are accepted.
    """
    if not is_half_year_start(start):
        raise ValueError(f"forecast start must be January 1 or July 1, got {start}")
    if start.month == 1:
        end = _dt.date(start.year, 7, 1)
    else:
        end = _dt.date(start.year + 1, 1, 1)
    return (end - start.to_date()).days


@dataclass(frozen=True)
class DailyWeather:
    temperature: float
    precipitation: float

    def __post_init__(self):
        if not np.isfinite(self.temperature):
            raise ValueError("temperature must be finite")
        if not (self.precipitation >= 0):
            raise ValueError("precipitation must be >= 0")


@dataclass(eq=False)
class ForecastEnsemble:
    """N members x H days of daily mean temperature and precipitation.

    ``temperature`` and ``precipitation`` are ``(N, H)`` float arrays; row ``j``
    belongs to ``member_ids[j]``.
    """

    start: CalendarDay
    member_ids: np.ndarray
    temperature: np.ndarray
    precipitation: np.ndarray

    def __post_init__(self):
        self.member_ids = np.asarray(self.member_ids, dtype=np.int64)
        self.temperature = np.asarray(self.temperature, dtype=np.float64)
        self.precipitation = np.asarray(self.precipitation, dtype=np.float64)
        if self.temperature.ndim != 2 or self.temperature.shape != self.precipitation.shape:
            raise ValueError("temperature and precipitation must be equal-shape (N, H) arrays")
        if self.temperature.shape[0] != self.member_ids.shape[0]:
            raise ValueError("one member id per ensemble row is required")
        if self.n_members < 1 or self.horizon_days < 1:
            raise ValueError("ensemble must have at least one member and one day")
        if len(set(self.member_ids.tolist())) != self.n_members:
            raise ValueError("member ids must be unique")
        if not np.all(np.isfinite(self.temperature)):
            raise ValueError("temperature must be finite")
        if not np.all(self.precipitation >= 0):
            raise ValueError("precipitation must be >= 0")

    @property
    def n_members(self) -> int:
        return int(self.temperature.shape[0])

    @property
    def horizon_days(self) -> int:
        return int(self.temperature.shape[1])

    @property
    def dates(self) -> list[CalendarDay]:
        return date_range(self.start, self.horizon_days)

    def calendar_features(self) -> tuple[np.ndarray, np.ndarray]:
        """(day_of_month, month) arrays of length H."""
        dates = self.dates
        return (np.array([d.day for d in dates], dtype=np.float64),
                np.array([d.month for d in dates], dtype=np.float64))

    def row(self, member_id: int) -> int:
        hits = np.flatnonzero(self.member_ids == member_id)
        if hits.size == 0:
            raise KeyError(f"member {member_id} not in ensemble")
        return int(hits[0])

    def weather(self, member_id: int) -> list[DailyWeather]:
        j = self.row(member_id)
        return [DailyWeather(float(t), float(p))
                for t, p in zip(self.temperature[j], self.precipitation[j])]

    def select(self, member_ids) -> "ForecastEnsemble":
        rows = [self.row(m) for m in member_ids]
        return ForecastEnsemble(self.start, self.member_ids[rows],
                                self.temperature[rows], self.precipitation[rows])

    def equals(self, other: "ForecastEnsemble") -> bool:
        return (self.start == other.start
                and np.array_equal(self.member_ids, other.member_ids)
                and np.array_equal(self.temperature, other.temperature)
                and np.array_equal(self.precipitation, other.precipitation))


@dataclass(eq=False)
class ImpactSeries:
    member_id: int
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.member_id = int(self.member_id)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("impact values must be one-dimensional")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("R0 values must be finite and nonnegative")

    def __len__(self) -> int:
        return int(self.values.shape[0])
