import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from r0surrogate import qrf, uq
from r0surrogate.timeseries import CalendarDay, date_range

from oracles import empirical_inverse_cdf

DATES = date_range(CalendarDay(2021, 1, 1), 5)


def band(lower, upper, kind=uq.PER_MEMBER, member_id=1):
    return uq.QuantileBand(DATES[:len(lower)], lower, upper, kind, member_id)


def test_default_levels_are_one_sigma():
    lv = uq.QuantileLevels()
    phi = lambda z: 0.5 * (1 + math.erf(z / math.sqrt(2)))  # noqa: E731
    assert (lv.lower, lv.upper) == (0.1587, 0.8413)
    assert round(phi(-1), 4) == lv.lower and round(phi(1), 4) == lv.upper
    with pytest.raises(ValueError):
        uq.QuantileLevels(0.9, 0.1)


def test_band_rejects_crossed_bounds():
    with pytest.raises(ValueError):
        band([1.0, 2.0], [2.0, 1.0])
    with pytest.raises(ValueError):
        uq.QuantileBand(DATES[:2], [1.0], [2.0], uq.PER_MEMBER)


def test_empirical_quantile_examples():
    assert uq.empirical_quantile(np.arange(1, 101), 0.5) == 50
    assert uq.empirical_quantile([0, 1, 2, 3], 0.25) == 0
    assert uq.empirical_quantile([5.0] * 7, 0.1587) == 5.0


@given(arrays(np.float64, st.integers(1, 300), elements=st.floats(-1e6, 1e6)),
       st.floats(0.001, 0.999))
def test_empirical_quantile_matches_exact_scan(x, q):
    assert uq.empirical_quantile(x, q) == empirical_inverse_cdf(x, q)


def test_qrf_band_on_constant_targets():
    m = qrf.fit(np.random.default_rng(0).normal(size=(50, 4)), np.full(50, 1.5),
                qrf.QrfConfig(n_trees=5))
    b = uq.member_band_qrf(m, np.zeros((5, 4)), DATES)
    assert np.all(b.lower == 1.5) and np.all(b.upper == 1.5)


def test_qrf_band_hand_cdf():
    # single leaf {1,2,3,4}: F = .25,.5,.75,1 -> q .1587 -> 1, q .8413 -> 4
    m = qrf.fit(np.zeros((4, 4)), [4.0, 1.0, 3.0, 2.0],
                qrf.QrfConfig(n_trees=1, bootstrap=False))
    b = uq.member_band_qrf(m, np.zeros((2, 4)), DATES[:2])
    assert list(b.lower) == [1.0, 1.0] and list(b.upper) == [4.0, 4.0]


def test_qrf_band_is_ordered():
    rng = np.random.default_rng(1)
    X, y = rng.normal(size=(500, 4)), rng.normal(size=500)
    m = qrf.fit(X, y, qrf.QrfConfig(n_trees=20, seed=1))
    dates = date_range(CalendarDay(2021, 1, 1), 100)
    b = uq.member_band_qrf(m, rng.normal(size=(100, 4)), dates)
    assert np.all(b.lower <= b.upper)


def test_blstm_band_examples():
    b = uq.member_band_blstm(np.full((3, 50), 2.0), DATES[:3])
    assert np.all(b.width == 0) and np.all(b.lower == 2.0)
    rng = np.random.default_rng(2)
    s = rng.normal(size=(5, 200))
    b = uq.member_band_blstm(s, DATES)
    assert np.all(b.lower >= s.min(axis=1)) and np.all(b.upper <= s.max(axis=1))


def test_average_combination():
    a, b = band([0.0], [2.0], member_id=1), band([2.0], [4.0], member_id=2)
    c = uq.combined_band_average([a, b])
    assert (c.lower[0], c.upper[0], c.kind) == (1.0, 3.0, uq.AVERAGED)
    one = uq.combined_band_average([a])
    assert one.lower[0] == 0.0 and one.upper[0] == 2.0


@settings(max_examples=50)
@given(st.integers(1, 8).flatmap(lambda n: arrays(np.float64, (n, 2, 5),
                                                  elements=st.floats(-100, 100))),
       st.randoms(use_true_random=False))
def test_average_width_bound_and_permutation_invariance(raw, rnd):
    lo, hi = np.minimum(raw[:, 0], raw[:, 1]), np.maximum(raw[:, 0], raw[:, 1])
    bands = [band(lo[j], hi[j], member_id=j) for j in range(lo.shape[0])]
    c = uq.combined_band_average(bands)
    assert np.all(c.width <= (hi - lo).max(axis=0) + 1e-9)
    shuffled = list(bands)
    rnd.shuffle(shuffled)
    d = uq.combined_band_average(shuffled)
    np.testing.assert_allclose(d.lower, c.lower, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(d.upper, c.upper, rtol=1e-12, atol=1e-12)


def test_pooled_examples():
    s = np.array([[[0.0, 1.0]], [[2.0, 3.0]]])  # N=2, D=1, M=2
    b = uq.pooled_band_direct(s, DATES[:1], uq.QuantileLevels(0.25, 0.75))
    assert b.lower[0] == 0.0 and b.upper[0] == 2.0
    same = uq.pooled_band_direct(np.full((3, 2, 4), 7.0), DATES[:2])
    assert np.all(same.lower == 7.0) and np.all(same.upper == 7.0)


@given(arrays(np.float64, (4, 3, 6), elements=st.floats(-50, 50)))
def test_pooling_is_flat(s):
    b = uq.pooled_band_direct(s, DATES[:3])
    # any re-partition of the same pool gives the same band
    regrouped = s.transpose(1, 0, 2).reshape(3, 2, 12).transpose(1, 0, 2)
    c = uq.pooled_band_direct(regrouped, DATES[:3])
    ragged = uq.pooled_band_direct([s[0], np.concatenate([s[1], s[2], s[3]], axis=1)], DATES[:3])
    for other in (c, ragged):
        np.testing.assert_array_equal(other.lower, b.lower)
        np.testing.assert_array_equal(other.upper, b.upper)
    flat = s.transpose(1, 0, 2).reshape(3, -1)
    assert np.all(b.lower >= flat.min(axis=1)) and np.all(b.upper <= flat.max(axis=1))


def test_hit_rate_examples():
    t = np.array([0.0, 0.3, 5.0, 1e3])
    assert uq.hit_rate(band([0.0] * 4, [1e300] * 4), t) == 1.0
    assert uq.hit_rate(band([2.0] * 4, [2.0] * 4), t) == 0.0
    # bounds are inclusive
    assert uq.hit_rate(band([0.3, 0.3], [5.0, 5.0]), [0.3, 5.0]) == 1.0
    h, n = uq.hit_counts(band([0.0, 0.0], [1.0, 1.0]), [[0.5, 2.0, 1.0], [3.0, 0.0, -1.0]])
    assert (h, n) == (3, 6)


@given(arrays(np.float64, (5, 3), elements=st.floats(-10, 10)),
       arrays(np.float64, 5, elements=st.floats(-12, 12)), st.floats(0, 3), st.floats(0, 3))
def test_hit_rate_counting_and_widening(raw, t, dl, du):
    raw = np.sort(raw, axis=1)
    b = band(raw[:, 0], raw[:, 2])
    r = uq.hit_rate(b, t)
    inside = (t >= raw[:, 0]) & (t <= raw[:, 2])
    assert 0.0 <= r <= 1.0
    assert r == pytest.approx(1.0 - np.mean(~inside))
    wider = band(raw[:, 0] - dl, raw[:, 2] + du)
    assert uq.hit_rate(wider, t) >= r


def test_report_layout_and_csv():
    rep = uq.HitRateReport()
    for model in uq.MODELS:
        for ds in ("dataset1", "dataset2"):
            for kind in uq.BAND_KINDS:
                if model == "RFQR" and kind == uq.POOLED:
                    rep.add(uq.HitRateRow.na(model, ds, kind))
                else:
                    rep.add(uq.HitRateRow(model, ds, kind, 0.5, 10))
    csv_text = rep.to_csv()
    lines = csv_text.splitlines()
    assert lines[0] == "model,dataset,band_kind,hit_rate_pct,n_samples"
    assert len(lines) == 13
    assert "RFQR,dataset1,pooled,na,0" in lines
    back = uq.HitRateReport.from_csv(csv_text)
    assert back.to_csv() == csv_text
    assert back.get("RFQR", "dataset2", uq.POOLED).not_applicable
    text = rep.to_text()
    assert "Dataset 1, Range [Qd_l, Qd_u]" in text
    assert len(text.splitlines()) == 7


def test_sorted_table():
    t = uq.sorted_band_table([3.0, 1.0, 2.0], [0, 0, 0], [5, 5, 5], [1, 2, 3], DATES[:3])
    assert list(t["target"]) == [1.0, 2.0, 3.0]
    assert list(t["member_id"]) == [2, 3, 1]
    assert list(t["rank"]) == [1, 2, 3]
    tie = uq.sorted_band_table([1.0, 1.0, 1.0, 0.0], [0] * 4, [2] * 4, [7, 3, 3, 9],
                               [DATES[1], DATES[2], DATES[0], DATES[4]])
    assert list(tie["member_id"]) == [9, 3, 3, 7]
    assert tie["date"][1:3] == [DATES[0].isoformat(), DATES[2].isoformat()]
