import calendar
import datetime as dt

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from r0surrogate.timeseries import (CalendarDay, DailyWeather, ForecastEnsemble, ImpactSeries,
                                    date_add, date_range, days_between, horizon_for)

days = st.dates(min_value=dt.date(1900, 1, 1), max_value=dt.date(2200, 12, 31)).map(
    CalendarDay.from_date)


@pytest.mark.parametrize("start, offset, expected", [
    ("2021-01-01", 0, "2021-01-01"),
    ("2021-01-01", 180, "2021-06-30"),
    ("2020-02-28", 1, "2020-02-29"),
])
def test_date_add_examples(start, offset, expected):
    assert date_add(CalendarDay.parse(start), offset) == CalendarDay.parse(expected)


def test_date_add_counts_days_on_a_calendar():
    # walk the calendar one day at a time, using month lengths only
    y, m, d = 2021, 1, 1
    for _ in range(180):
        d += 1
        if d > calendar.monthrange(y, m)[1]:
            d, m = 1, m + 1
    assert (y, m, d) == (2021, 6, 30)


@pytest.mark.parametrize("start, expected", [
    ("2021-01-01", 181), ("2020-01-01", 182), ("2021-07-01", 184),
])
def test_horizon_examples(start, expected):
    assert horizon_for(CalendarDay.parse(start)) == expected


@pytest.mark.parametrize("start, months", [
    ("2021-01-01", range(1, 7)), ("2020-01-01", range(1, 7)), ("2021-07-01", range(7, 13)),
])
def test_horizon_matches_month_lengths(start, months):
    s = CalendarDay.parse(start)
    assert horizon_for(s) == sum(calendar.monthrange(s.year, m)[1] for m in months)


def test_horizon_rejects_other_starts():
    with pytest.raises(ValueError):
        horizon_for(CalendarDay(2021, 3, 1))


@given(days, st.integers(0, 5000), st.integers(0, 5000))
def test_date_add_is_additive(d, a, b):
    assert date_add(d, a + b) == date_add(date_add(d, a), b)


@given(st.integers(1901, 2199))
def test_half_years_cover_the_year(year):
    total = horizon_for(CalendarDay(year, 1, 1)) + horizon_for(CalendarDay(year, 7, 1))
    assert total == (366 if calendar.isleap(year) else 365)


@given(days, st.integers(-3000, 3000))
def test_days_between_inverts_date_add(d, k):
    assert days_between(d, date_add(d, k)) == k


def test_calendar_day_validation_and_format():
    with pytest.raises(ValueError):
        CalendarDay(2021, 2, 29)
    with pytest.raises(ValueError):
        CalendarDay.parse("2021-13-01")
    d = CalendarDay(2020, 2, 29)
    assert d.isoformat() == "2020-02-29"
    assert d.day_of_year == 60
    assert CalendarDay(2021, 1, 2) > CalendarDay(2020, 12, 31)


def test_date_range_is_consecutive():
    r = date_range(CalendarDay(2020, 12, 30), 4)
    assert [x.isoformat() for x in r] == ["2020-12-30", "2020-12-31", "2021-01-01", "2021-01-02"]


def test_weather_validation():
    with pytest.raises(ValueError):
        DailyWeather(float("nan"), 1.0)
    with pytest.raises(ValueError):
        DailyWeather(20.0, -0.1)


def _ensemble(n=3, h=5):
    rng = np.random.default_rng(0)
    return ForecastEnsemble(CalendarDay(2021, 1, 1), np.arange(1, n + 1),
                            20 + rng.normal(size=(n, h)), rng.gamma(1.0, size=(n, h)))


def test_ensemble_accessors():
    e = _ensemble()
    assert (e.n_members, e.horizon_days) == (3, 5)
    assert e.dates[-1] == CalendarDay(2021, 1, 5)
    dom, month = e.calendar_features()
    np.testing.assert_array_equal(dom, [1, 2, 3, 4, 5])
    np.testing.assert_array_equal(month, [1] * 5)
    w = e.weather(2)
    assert w[0].temperature == e.temperature[1, 0]
    sub = e.select([3, 1])
    np.testing.assert_array_equal(sub.member_ids, [3, 1])
    np.testing.assert_array_equal(sub.precipitation[0], e.precipitation[2])


def test_ensemble_validation():
    e = _ensemble()
    with pytest.raises(ValueError):
        ForecastEnsemble(e.start, [1, 1, 2], e.temperature, e.precipitation)
    with pytest.raises(ValueError):
        ForecastEnsemble(e.start, e.member_ids, e.temperature, -e.precipitation)
    with pytest.raises(ValueError):
        ForecastEnsemble(e.start, e.member_ids, e.temperature[:, :3], e.precipitation)
    with pytest.raises(KeyError):
        e.row(99)


def test_impact_series_rejects_negative():
    with pytest.raises(ValueError):
        ImpactSeries(1, [0.0, -1.0])
    assert len(ImpactSeries(1, [0.0, 2.0])) == 2
