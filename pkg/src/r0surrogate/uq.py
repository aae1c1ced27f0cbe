"""Quantile bands (per member, averaged over members, pooled over samples) and hit rates."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

PER_MEMBER = "per_member"
AVERAGED = "averaged"
POOLED = "pooled"
BAND_KINDS = (PER_MEMBER, AVERAGED, POOLED)
BAND_LABELS = {PER_MEMBER: "[q_l, q_u]", AVERAGED: "[Q_l, Q_u]", POOLED: "[Qd_l, Qd_u]"}
MODELS = ("RFQR", "BLSTM")


@dataclass(frozen=True)
class QuantileLevels:
    lower: float = 0.1587
    upper: float = 0.8413

    def __post_init__(self):
        if not 0 < self.lower < self.upper < 1:
            raise ValueError("quantile levels need 0 < lower < upper < 1")

    def as_tuple(self) -> tuple[float, float]:
        return (self.lower, self.upper)


@dataclass(eq=False)
class QuantileBand:
    dates: list
    lower: np.ndarray
    upper: np.ndarray
    kind: str = PER_MEMBER
    member_id: int | None = None

    def __post_init__(self):
        self.lower = np.asarray(self.lower, np.float64)
        self.upper = np.asarray(self.upper, np.float64)
        if not (len(self.dates) == self.lower.shape[0] == self.upper.shape[0]):
            raise ValueError("band dates, lower and upper must have equal lengths")
        if np.any(self.lower > self.upper):
            raise ValueError("band lower bound exceeds upper bound")
        if self.kind not in BAND_KINDS:
            raise ValueError(f"unknown band kind {self.kind!r}")

    def __len__(self) -> int:
        return len(self.dates)

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower


def empirical_quantile(samples, q: float, axis: int = -1) -> np.ndarray:
    """Inverse-CDF (lower) empirical quantile along ``axis``.

    Returns the ``k``-th smallest value for the smallest ``k`` with
    ``k / n >= q`` (evaluated in floating point), which is also the value a
    forest query returns when every sample carries weight ``1 / n``.
    """
    s = np.sort(np.asarray(samples, np.float64), axis=axis)
    n = s.shape[axis]
    if n == 0:
        raise ValueError("no samples")
    k = math.ceil(q * n)
    k = min(max(k, 1), n)
    while k > 1 and (k - 1) / n >= q:
        k -= 1
    while k < n and k / n < q:
        k += 1
    return np.take(s, k - 1, axis=axis)


def band_from_samples(dates, samples, levels: QuantileLevels, kind: str,
                      member_id=None) -> QuantileBand:
    """Band from a ``(D, m)`` array: empirical quantiles of the ``m`` samples per date."""
    samples = np.asarray(samples, np.float64)
    if samples.ndim != 2 or samples.shape[1] < 2:
        raise ValueError("need at least 2 samples per date")
    return QuantileBand(list(dates), empirical_quantile(samples, levels.lower, axis=1),
                        empirical_quantile(samples, levels.upper, axis=1), kind, member_id)


def member_band_qrf(model, features, dates, levels: QuantileLevels | None = None,
                    member_id=None) -> QuantileBand:
    """Per-member band predicted directly by the forest for each row of ``features``."""
    levels = levels or QuantileLevels()
    q = model.predict_quantiles(features, levels.as_tuple())
    return QuantileBand(list(dates), q[:, 0], q[:, 1], PER_MEMBER, member_id)


def member_band_blstm(samples, dates, levels: QuantileLevels | None = None,
                      member_id=None) -> QuantileBand:
    return band_from_samples(dates, samples, levels or QuantileLevels(), PER_MEMBER, member_id)


def combined_band_average(bands: list[QuantileBand]) -> QuantileBand:
    """Date-wise arithmetic mean of the members' lower and upper quantiles."""
    if not bands:
        raise ValueError("no bands to combine")
    dates = list(bands[0].dates)
    for b in bands[1:]:
        if list(b.dates) != dates:
            raise ValueError("bands to combine must share dates")
    lower = np.mean([b.lower for b in bands], axis=0)
    upper = np.mean([b.upper for b in bands], axis=0)
    # the mean of ordered pairs is ordered; guard the last ulp
    return QuantileBand(dates, np.minimum(lower, upper), upper, AVERAGED)


def pooled_band_direct(samples, dates, levels: QuantileLevels | None = None) -> QuantileBand:
    """Band from all samples of all members at a date.

    ``samples`` is ``(N, D, M)`` (members, dates, experiments), or a list of
    per-member ``(D, M_j)`` arrays.
    """
    levels = levels or QuantileLevels()
    if isinstance(samples, (list, tuple)):
        flat = np.concatenate([np.asarray(s, np.float64) for s in samples], axis=1)
    else:
        s = np.asarray(samples, np.float64)
        flat = s.transpose(1, 0, 2).reshape(s.shape[1], -1)
    return band_from_samples(dates, flat, levels, POOLED)


def hit_counts(band: QuantileBand, targets, target_dates=None) -> tuple[int, int]:
    """(hits, total) with inclusive bounds.

    ``targets`` is ``(D,)`` or ``(D, N)``; with two dimensions every column is
    judged against the same band.
    """
    if target_dates is not None and list(target_dates) != list(band.dates):
        raise ValueError("targets are not aligned with band dates")
    t = np.asarray(targets, np.float64)
    if t.shape[0] != len(band):
        raise ValueError(f"{t.shape[0]} target rows for a band of {len(band)} dates")
    lo, hi = band.lower, band.upper
    if t.ndim == 2:
        lo, hi = lo[:, None], hi[:, None]
    inside = (t >= lo) & (t <= hi)
    return int(inside.sum()), int(inside.size)


def hit_rate(band: QuantileBand, targets, target_dates=None) -> float:
    hits, n = hit_counts(band, targets, target_dates)
    return hits / n if n else float("nan")


@dataclass(frozen=True)
class HitRateRow:
    model: str
    dataset: str
    band_kind: str
    hit_rate: float
    n_samples: int
    not_applicable: bool = False

    @classmethod
    def na(cls, model, dataset, band_kind):
        return cls(model, dataset, band_kind, float("nan"), 0, True)


@dataclass
class HitRateReport:
    rows: list = field(default_factory=list)

    def add(self, row: HitRateRow) -> None:
        self.rows.append(row)

    def get(self, model: str, dataset: str, band_kind: str) -> HitRateRow:
        for r in self.rows:
            if (r.model, r.dataset, r.band_kind) == (model, dataset, band_kind):
                return r
        raise KeyError((model, dataset, band_kind))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "dataset", "band_kind", "hit_rate_pct", "n_samples"])
        for r in self.rows:
            pct = "na" if r.not_applicable else f"{100.0 * r.hit_rate:.4f}"
            w.writerow([r.model, r.dataset, r.band_kind, pct, r.n_samples])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "HitRateReport":
        rep = cls()
        for rec in csv.DictReader(io.StringIO(text)):
            if rec["hit_rate_pct"] == "na":
                rep.add(HitRateRow.na(rec["model"], rec["dataset"], rec["band_kind"]))
            else:
                rep.add(HitRateRow(rec["model"], rec["dataset"], rec["band_kind"],
                                   float(rec["hit_rate_pct"]) / 100.0, int(rec["n_samples"])))
        return rep

    def merged(self, other: "HitRateReport") -> "HitRateReport":
        return HitRateReport(self.rows + other.rows)

    def to_text(self) -> str:
        """Table laid out like the published one: rows dataset x band, columns model."""
        datasets = sorted({r.dataset for r in self.rows})
        models = [m for m in MODELS if any(r.model == m for r in self.rows)]
        lines = [f"{'':34s}" + "".join(f"{m:>10s}" for m in models)]
        for kind in BAND_KINDS:
            for ds in datasets:
                cells = []
                for m in models:
                    try:
                        r = self.get(m, ds, kind)
                    except KeyError:
                        cells.append(f"{'-':>10s}")
                        continue
                    cells.append(f"{'na':>10s}" if r.not_applicable
                                 else f"{100.0 * r.hit_rate:9.1f}%")
                label = f"{ds.replace('dataset', 'Dataset ')}, Range {BAND_LABELS[kind]}"
                lines.append(f"{label:34s}" + "".join(cells))
        return "\n".join(lines) + "\n"


def sorted_band_table(targets, lower, upper, member_ids, dates) -> dict:
    """Rows sorted by target (ties by member id, then date), as column arrays.

    ``dates`` may hold ``CalendarDay`` values or ISO strings.
    """
    targets = np.asarray(targets, np.float64)
    member_ids = np.asarray(member_ids)
    keys = [str(d) for d in dates]
    order = sorted(range(targets.shape[0]), key=lambda i: (targets[i], int(member_ids[i]), keys[i]))
    order = np.asarray(order, dtype=np.int64)
    return {"rank": np.arange(1, order.shape[0] + 1), "target": targets[order],
            "lower": np.asarray(lower, np.float64)[order], "upper": np.asarray(upper, np.float64)[order],
            "member_id": member_ids[order], "date": [keys[i] for i in order]}
