"""Stage functions shared by the CLI: encode splits, train surrogates, build bands, evaluate."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import qrf, uq
from .blstm import BlstmConfig, BlstmModel, make_sequences, mc_predict
from .blstm import train as train_blstm
from .forecast import DataFormatError, DatasetSplit, PeriodData
from .timeseries import CalendarDay

log = logging.getLogger(__name__)

BAND_COLUMNS = ("band_kind", "member_id", "date", "lower", "upper", "target")
SORTED_COLUMNS = ("rank", "target", "lower", "upper", "member_id", "date")


def tabular_features(period: PeriodData) -> tuple[np.ndarray, np.ndarray]:
    """``(N*H, 4)`` features [day_of_month, month, precipitation, temperature] and R0 targets.

    Rows run member by member, day by day.
    """
    ens = period.ensemble
    dom, month = ens.calendar_features()
    n, h = ens.n_members, ens.horizon_days
    X = np.empty((n, h, 4))
    X[:, :, 0] = dom
    X[:, :, 1] = month
    X[:, :, 2] = ens.precipitation
    X[:, :, 3] = ens.temperature
    return X.reshape(n * h, 4), period.r0.reshape(n * h)


def tabular_dataset(periods: list[PeriodData]) -> tuple[np.ndarray, np.ndarray]:
    parts = [tabular_features(p) for p in periods]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def fit_qrf(split: DatasetSplit, cfg: qrf.QrfConfig) -> qrf.QrfModel:
    X, y = tabular_dataset(split.train)
    log.info("fitting %d-tree forest on %d rows", cfg.n_trees, X.shape[0])
    return qrf.fit(X, y, cfg)


def fit_blstm(split: DatasetSplit, cfg: BlstmConfig, progress=None) -> BlstmModel:
    seqs = make_sequences(split.train)
    log.info("training LSTM on %d sequences", len(seqs))
    return train_blstm(seqs, cfg, progress=progress)


@dataclass
class BandSet:
    """Every band one model produced on one split's test part."""

    model: str
    dataset: str
    bands: list = field(default_factory=list)

    def of_kind(self, kind: str) -> list:
        return [b for b in self.bands if b.kind == kind]


def predict_qrf(model: qrf.QrfModel, split: DatasetSplit,
                levels: uq.QuantileLevels) -> BandSet:
    out = BandSet("RFQR", split.label)
    for period in split.test:
        X, _ = tabular_features(period)
        q = model.predict_quantiles(X, levels.as_tuple())
        h = period.ensemble.horizon_days
        dates = period.ensemble.dates
        members = []
        for j, mid in enumerate(period.ensemble.member_ids):
            rows = slice(j * h, (j + 1) * h)
            members.append(uq.QuantileBand(dates, q[rows, 0], q[rows, 1], uq.PER_MEMBER, int(mid)))
        out.bands.extend(members)
        out.bands.append(uq.combined_band_average(members))
    return out


def predict_blstm(model: BlstmModel, split: DatasetSplit, levels: uq.QuantileLevels,
                  m: int | None = None, seed: int = 0) -> BandSet:
    out = BandSet("BLSTM", split.label)
    for p_i, period in enumerate(split.test):
        seqs = make_sequences([period])
        # one seed stream per test period
        samples = mc_predict(model, seqs, m, seed=seed + 7919 * p_i)
        ids = period.ensemble.member_ids
        n_win = len(seqs) // len(ids)
        dates = seqs.target_dates[:n_win]
        per_member = samples.reshape(len(ids), n_win, -1)
        members = [uq.member_band_blstm(per_member[j], dates, levels, int(mid))
                   for j, mid in enumerate(ids)]
        out.bands.extend(members)
        out.bands.append(uq.combined_band_average(members))
        out.bands.append(uq.pooled_band_direct(per_member, dates, levels))
    return out


def target_lookup(split: DatasetSplit) -> dict:
    """(member_id, date) -> R0 for the test part."""
    out = {}
    for p in split.test:
        r0 = p.r0
        for j, mid in enumerate(p.ensemble.member_ids):
            for d, v in zip(p.ensemble.dates, r0[j]):
                out[(int(mid), d)] = float(v)
    return out


def date_members(split: DatasetSplit) -> dict:
    """date -> test member ids present on that date."""
    out = {}
    for p in split.test:
        for d in p.ensemble.dates:
            out.setdefault(d, []).extend(int(m) for m in p.ensemble.member_ids)
    return out


def evaluate(bandset: BandSet, split: DatasetSplit) -> uq.HitRateReport:
    targets = target_lookup(split)
    members_on = date_members(split)
    report = uq.HitRateReport()
    for kind in uq.BAND_KINDS:
        bands = bandset.of_kind(kind)
        if not bands:
            report.add(uq.HitRateRow.na(bandset.model, bandset.dataset, kind))
            continue
        hits = total = 0
        for b in bands:
            try:
                if kind == uq.PER_MEMBER:
                    t = [targets[(b.member_id, d)] for d in b.dates]
                else:
                    t = [[targets[(m, d)] for m in members_on[d]] for d in b.dates]
            except KeyError as exc:
                raise DataFormatError(f"band has no matching target for {exc.args[0]}") from None
            h, n = uq.hit_counts(b, t)
            hits += h
            total += n
        report.add(uq.HitRateRow(bandset.model, bandset.dataset, kind, hits / total, total))
    return report


def sorted_table(bandset: BandSet, split: DatasetSplit) -> dict:
    """Per-member band rows of all test members sorted by true R0."""
    targets = target_lookup(split)
    tg, lo, hi, mids, dates = [], [], [], [], []
    for b in bandset.of_kind(uq.PER_MEMBER):
        for d, l, u in zip(b.dates, b.lower, b.upper):
            tg.append(targets[(b.member_id, d)])
            lo.append(l)
            hi.append(u)
            mids.append(b.member_id)
            dates.append(d.isoformat())
    return uq.sorted_band_table(tg, lo, hi, mids, dates)


# --- band / sorted-table CSV -------------------------------------------------

def write_bands_csv(bandset: BandSet, split: DatasetSplit | None, path) -> None:
    targets = target_lookup(split) if split is not None else {}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# model={bandset.model} dataset={bandset.dataset}\n")
        fh.write(",".join(BAND_COLUMNS) + "\n")
        for b in bandset.bands:
            mid = "" if b.member_id is None else str(b.member_id)
            for d, lo, hi in zip(b.dates, b.lower, b.upper):
                t = targets.get((b.member_id, d)) if b.member_id is not None else None
                ts = "" if t is None else f"{t:.6f}"
                fh.write(f"{b.kind},{mid},{d.isoformat()},{lo:.6f},{hi:.6f},{ts}\n")


def read_bands_csv(path) -> tuple[BandSet, dict]:
    """Bands plus the (member_id, date) -> target values stored alongside them."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataFormatError(f"cannot read band file ({exc.strerror})", path) from None
    meta = {}
    if text and text[0].startswith("#"):
        meta = dict(kv.split("=", 1) for kv in text[0][1:].split())
        text = text[1:]
    reader = csv.DictReader(text)
    if reader.fieldnames is None or any(c not in reader.fieldnames for c in BAND_COLUMNS[:5]):
        raise DataFormatError(f"band file needs columns {', '.join(BAND_COLUMNS[:5])}", path)
    groups: dict = {}
    targets = {}
    for lineno, rec in enumerate(reader, start=3 if meta else 2):
        try:
            kind = rec["band_kind"]
            mid = int(rec["member_id"]) if rec["member_id"] else None
            d = CalendarDay.parse(rec["date"])
            lo, hi = float(rec["lower"]), float(rec["upper"])
        except (ValueError, TypeError) as exc:
            raise DataFormatError(f"unparseable band row ({exc})", path, lineno) from None
        if kind not in uq.BAND_KINDS:
            raise DataFormatError(f"unknown band kind {kind!r}", path, lineno)
        if lo > hi:
            raise DataFormatError("lower bound above upper bound", path, lineno)
        g = groups.setdefault((kind, mid), [])
        g.append((d, lo, hi))
        if rec.get("target"):
            targets[(mid, d)] = float(rec["target"])
    bs = BandSet(meta.get("model", "?"), meta.get("dataset", "?"))
    for (kind, mid), rows in groups.items():
        rows.sort(key=lambda r: r[0])
        # combined bands of different periods share a key; split them at date gaps
        chunk = [rows[0]]
        for r in rows[1:]:
            if (r[0].to_date() - chunk[-1][0].to_date()).days != 1:
                bs.bands.append(_band(chunk, kind, mid))
                chunk = []
            chunk.append(r)
        bs.bands.append(_band(chunk, kind, mid))
    return bs, targets


def _band(rows, kind, mid):
    return uq.QuantileBand([r[0] for r in rows], [r[1] for r in rows], [r[2] for r in rows],
                           kind, mid)


def write_sorted_csv(table: dict, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(SORTED_COLUMNS) + "\n")
        for i in range(len(table["rank"])):
            fh.write(f"{table['rank'][i]},{table['target'][i]:.6f},{table['lower'][i]:.6f},"
                     f"{table['upper'][i]:.6f},{table['member_id'][i]},{table['date'][i]}\n")


def read_sorted_csv(path) -> dict:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or any(c not in reader.fieldnames for c in SORTED_COLUMNS[:4]):
            raise DataFormatError(f"sorted-band file needs columns {', '.join(SORTED_COLUMNS[:4])}",
                                  path)
        rows = list(reader)
    return {"rank": np.array([int(r["rank"]) for r in rows]),
            "target": np.array([float(r["target"]) for r in rows]),
            "lower": np.array([float(r["lower"]) for r in rows]),
            "upper": np.array([float(r["upper"]) for r in rows])}
