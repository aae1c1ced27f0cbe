"""Acceptance suite: one test per criterion, each logs a pass/fail line.

The lines are printed as the tests run (visible with ``-s``) and again in the
terminal summary. Criteria 6 and 9 share two full ``run-all`` invocations on the
repository config, which take a good while on a small machine.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from r0surrogate import cli, forecast, impact, qrf, uq
from r0surrogate.blstm import BlstmConfig, make_sequences, mc_predict, network, train
from r0surrogate.config import load_config

from conftest import small_period
from oracles import empirical_inverse_cdf, finite_difference_check, oracle_quantile
from test_qrf import random_instance

REPO_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "default.json"
LEVELS = (0.1587, 0.8413)


def check(log, number, ok, detail):
    log(number, bool(ok), detail)
    assert ok, f"criterion {number}: {detail}"


def test_c1_qrf_oracle_equivalence(acceptance_log):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    checked = mismatches = 0
    for inst in range(120):
        X, y = random_instance(rng)
        cfg = qrf.QrfConfig(n_trees=int(rng.integers(1, 16)), bootstrap=bool(inst % 2),
                            seed=inst, min_samples_split=int(rng.integers(2, 12)))
        m = qrf.fit(X, y, cfg)
        queries = np.vstack([X[:3], rng.normal(size=(3, 4))])
        qs = [*LEVELS, float(rng.uniform(0.001, 0.999))]
        got = m.predict_quantiles(queries, qs)
        for i, x in enumerate(queries):
            for j, q in enumerate(qs):
                checked += 1
                mismatches += got[i, j] != oracle_quantile(m, x, q)
    elapsed = time.perf_counter() - t0
    check(acceptance_log, 1, mismatches == 0 and elapsed < 60,
          f"120 instances, {checked} quantiles, {mismatches} mismatches, {elapsed:.1f}s")


def test_c2_degenerate_forest(acceptance_log):
    rng = np.random.default_rng(7)
    bad = 0
    for _ in range(50):
        n = int(rng.integers(1, 200))
        X = rng.normal(size=(n, 4))
        y = np.round(rng.normal(size=n), int(rng.integers(0, 3)))
        m = qrf.fit(X, y, qrf.QrfConfig(n_trees=1, bootstrap=False, min_samples_split=n + 1))
        qs = [*LEVELS, 0.5, float(rng.uniform(0.001, 0.999))]
        got = m.predict_quantiles(rng.normal(size=(4, 4)), qs)
        want = [empirical_inverse_cdf(y, q) for q in qs]
        bad += int(np.any(got != np.array(want)[None, :]))
    check(acceptance_log, 2, bad == 0, f"50 forests, {bad} with a non-empirical quantile")


def _grad_error(rng, steps, batch, p):
    params = network.init_params(5, 4, (3,), rng, np.float64)
    for v in params.values():
        v += 0.1 * rng.standard_normal(v.shape)
    xt = rng.standard_normal((steps, batch, 5))
    y = rng.standard_normal(batch)
    masks = network.dropout_masks(rng, batch, params, p, np.float64)
    _, grads = network.loss_and_grads(params, xt, y, masks)
    err = finite_difference_check(
        params, lambda: network.loss_and_grads(params, xt, y, masks)[0], grads, step=1e-5)
    return err, sum(v.size for v in params.values())


def test_c3_gradient_check(acceptance_log):
    # hidden 4, 3 steps, 1 sample, no dropout; then a batch with fixed dropout masks
    err, n = _grad_error(np.random.default_rng(0), 3, 1, 0.0)
    err_masked, _ = _grad_error(np.random.default_rng(1), 4, 3, 0.5)
    check(acceptance_log, 3, max(err, err_masked) < 1e-4,
          f"max relative error {err:.2e} (masked batch {err_masked:.2e}) over {n} parameters")


def test_c4_zero_dropout_degeneracy(acceptance_log):
    seqs = make_sequences([small_period(n_members=2)])
    model = train(seqs, BlstmConfig(seed=1, hidden_size=8, head_sizes=(8,), epochs=3,
                                    batch_size=64, dropout_p=0.0))
    s = mc_predict(model, seqs, m=200, seed=3)
    identical = bool(np.all(s == s[:, :1]))
    band = uq.member_band_blstm(s, seqs.target_dates)
    widest = float(band.width.max())
    check(acceptance_log, 4, identical and widest == 0.0,
          f"{s.shape[0]} inputs x 200 samples identical={identical}, max width {widest}")


def test_c5_coverage_calibration(acceptance_log):
    rng = np.random.default_rng(5)

    def draw(n):
        X = rng.uniform(-1, 1, size=(n, 4))
        scale = 0.1 + 0.9 * np.abs(X[:, 1])
        return X, np.sin(3 * X[:, 0]) + scale * rng.standard_normal(n)

    X, y = draw(5000)
    Xt, yt = draw(2000)
    t0 = time.perf_counter()
    m = qrf.fit(X, y, qrf.QrfConfig(seed=1))
    lo, hi = m.predict_quantiles(Xt, LEVELS).T
    elapsed = time.perf_counter() - t0
    cover = float(np.mean((yt >= lo) & (yt <= hi)))
    check(acceptance_log, 5, 0.58 <= cover <= 0.78 and elapsed < 120,
          f"coverage {cover:.4f} (nominal 0.6826), {elapsed:.1f}s")


@pytest.fixture(scope="module")
def full_runs(tmp_path_factory):
    cfg = load_config(REPO_CONFIG)
    out = []
    for name in ("first", "second"):
        root = tmp_path_factory.mktemp(name)
        t0 = time.perf_counter()
        report = cli.cmd_run_all(cfg, root)
        out.append((root, report, time.perf_counter() - t0))
    return out


@pytest.mark.slow
def test_c6_directional_replication(full_runs, acceptance_log):
    _, report, _ = full_runs[0]

    def pct(model, ds, kind):
        return report.get(model, ds, kind).hit_rate

    parts, ok = [], True
    for ds in ("dataset1", "dataset2"):
        rf, bl = pct("RFQR", ds, uq.PER_MEMBER), pct("BLSTM", ds, uq.PER_MEMBER)
        rf_avg = pct("RFQR", ds, uq.AVERAGED)
        bl_avg, bl_pool = pct("BLSTM", ds, uq.AVERAGED), pct("BLSTM", ds, uq.POOLED)
        conds = {"a": rf > bl, "b": rf >= 0.70, "c": rf_avg < 0.5 * rf, "d": bl_pool > bl_avg}
        ok &= all(conds.values())
        failed = "".join(k for k, v in conds.items() if not v) or "-"
        parts.append(f"{ds}: RFQR {rf:.3f}/avg {rf_avg:.3f}, BLSTM {bl:.3f}/avg {bl_avg:.3f}"
                     f"/pooled {bl_pool:.3f}, failed {failed}")
    check(acceptance_log, 6, ok, "; ".join(parts))


def test_c7_dataset_shapes(acceptance_log):
    cfg = load_config(REPO_CONFIG)
    periods = []
    for s in forecast.dataset2_starts():
        ens = forecast.synthesize_ensemble(cfg.forecast, s)
        periods.append(forecast.PeriodData(ens, impact.propagate(ens, cfg.impact)))
    p21 = next(p for p in periods if p.start == cli.DATASET1_START)
    d1 = forecast.build_dataset1(p21.ensemble, p21.impacts)
    d2 = forecast.build_dataset2(periods)

    def members(parts):
        return {s.member_id for p in parts for s in p.impacts}

    shape = p21.ensemble.temperature.shape
    ok = (shape == (50, 181) and len(members(d1.train)) == 35 and len(members(d1.test)) == 15
          and len(d2.train) == 8 and len(d2.test) == 2
          and {p.start.year for p in d2.train} == {2017, 2018, 2019, 2020}
          and {p.start.year for p in d2.test} == {2021})
    check(acceptance_log, 7, ok,
          f"dataset1 {shape[0]}x{shape[1]} split {len(members(d1.train))}/"
          f"{len(members(d1.test))}; dataset2 {len(d2.train)} train + {len(d2.test)} test periods")


def test_c8_quantile_levels(acceptance_log):
    cfg = load_config(REPO_CONFIG)
    phi = lambda z: 0.5 * (1 + math.erf(z / math.sqrt(2)))  # noqa: E731
    lo, hi = cfg.uq.lower, cfg.uq.upper
    ok = (lo, hi) == LEVELS and round(phi(-1), 4) == lo and round(phi(1), 4) == hi
    check(acceptance_log, 8, ok, f"levels {lo}, {hi} vs Phi(-1)={phi(-1):.6f}, Phi(1)={phi(1):.6f}")


@pytest.mark.slow
def test_c9_runtime_and_determinism(full_runs, acceptance_log):
    (a, _, t_a), (b, _, t_b) = full_runs
    same = (a / "report.csv").read_bytes() == (b / "report.csv").read_bytes()
    check(acceptance_log, 9, same and t_a < 1200,
          f"run-all {t_a:.0f}s and {t_b:.0f}s (limit 1200s), report.csv identical={same}")


def _loss_traces(root):
    return {ds: np.loadtxt(root / ds / "blstm_model_loss.csv", delimiter=",", skiprows=1)[:, 1]
            for ds in ("dataset1", "dataset2")}


@pytest.mark.slow
def test_default_run_loss_decreases(full_runs):
    for ds, loss in _loss_traces(full_runs[0][0]).items():
        assert len(loss) == 200, ds
        assert loss[-20:].mean() < 0.5 * loss[:20].mean() or loss[-1] < 0.5 * loss[0], ds


@pytest.mark.slow
@pytest.mark.xfail(strict=False, reason="Adam at lr 0.01 with dropout 0.5 oscillates once the "
                   "loss flattens; about half the epoch transitions go up")
def test_default_run_loss_mostly_non_increasing(full_runs):
    for ds, loss in _loss_traces(full_runs[0][0]).items():
        assert np.mean(np.diff(loss) <= 0) >= 0.9, ds
