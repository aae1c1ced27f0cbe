"""``r0surrogate`` command line: one subcommand per pipeline stage, plus ``run-all``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import forecast, impact, pipeline, plotting, qrf, uq
from .blstm import BlstmModel, NumericalError
from .config import ConfigError, PipelineConfig, load_config
from .forecast import DataFormatError
from .timeseries import CalendarDay

log = logging.getLogger("r0surrogate")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
DATASET1_START = CalendarDay(2021, 1, 1)


def ensemble_name(start: CalendarDay) -> str:
    return f"ensemble_{start.isoformat()}.csv"


def impact_name(start: CalendarDay) -> str:
    return f"impact_{start.isoformat()}.csv"


# --- stages ------------------------------------------------------------------

def cmd_synth(cfg: PipelineConfig, starts, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for s in starts:
        ens = forecast.synthesize_ensemble(cfg.forecast, s)
        path = out_dir / ensemble_name(s)
        forecast.write_ensemble_csv(ens, path)
        log.info("wrote %s (%d members x %d days)", path, ens.n_members, ens.horizon_days)
        paths.append(path)
    return paths


def cmd_impact(cfg: PipelineConfig, ensemble_csvs, out_dir=None) -> list[Path]:
    paths = []
    for src in map(Path, ensemble_csvs):
        ens = forecast.load_ensemble_csv(src)
        series = impact.propagate(ens, cfg.impact)
        dest = Path(out_dir) if out_dir is not None else src.parent
        dest.mkdir(parents=True, exist_ok=True)
        path = dest / impact_name(ens.start)
        forecast.write_impact_csv(ens.start, series, path)
        log.info("wrote %s", path)
        paths.append(path)
    return paths


def cmd_dataset(label: str, data_dir, out, start: CalendarDay = DATASET1_START) -> Path:
    data_dir = Path(data_dir)
    starts = [start] if label == "dataset1" else forecast.dataset2_starts()
    sources, periods = {}, []
    for s in starts:
        ens_csv, imp_csv = data_dir / ensemble_name(s), data_dir / impact_name(s)
        for p in (ens_csv, imp_csv):
            if not p.exists():
                raise DataFormatError(f"missing input; run synth/impact for {s} first", p)
        ens = forecast.load_ensemble_csv(ens_csv)
        imp_start, series = forecast.load_impact_csv(imp_csv)
        if imp_start != ens.start:
            raise DataFormatError(f"impact file starts {imp_start}, ensemble starts {ens.start}",
                                  imp_csv)
        sources[s] = (ens_csv, imp_csv)
        periods.append(forecast.PeriodData(ens, series))
    try:
        if label == "dataset1":
            split = forecast.build_dataset1(periods[0].ensemble, periods[0].impacts)
        else:
            split = forecast.build_dataset2(periods)
    except ValueError as exc:
        raise DataFormatError(str(exc)) from None
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    forecast.write_split_manifest(split, sources, out)
    log.info("wrote %s (%d train rows, %d test rows)", out, split.n_train_rows, split.n_test_rows)
    return out


def cmd_train(cfg: PipelineConfig, model: str, split_path, out, loss_trace=None) -> Path:
    split = forecast.load_split_manifest(split_path)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    if model == "qrf":
        fitted = pipeline.fit_qrf(split, cfg.qrf)
    else:
        def progress(epoch, mse):
            if epoch % 20 == 0 or epoch == 1:
                log.info("epoch %d mse %.5f", epoch, mse)

        fitted = pipeline.fit_blstm(split, cfg.blstm_for(split.label), progress)
        trace = Path(loss_trace) if loss_trace is not None else out.with_name(out.stem + "_loss.csv")
        with open(trace, "w", encoding="utf-8") as fh:
            fh.write("epoch,mse\n")
            for i, v in enumerate(fitted.loss_trace, start=1):
                fh.write(f"{i},{v:.8f}\n")
    fitted.save(out)
    log.info("trained %s on %s in %.1fs -> %s", model, split.label, time.perf_counter() - t0, out)
    return out


def load_model(path):
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as z:
            kind = str(z["kind"]) if "kind" in z.files else ""
    except (OSError, ValueError) as exc:
        raise DataFormatError(f"cannot read model file ({exc})", path) from None
    try:
        if kind == "qrf":
            return qrf.QrfModel.load(path)
        if kind == "blstm":
            return BlstmModel.load(path)
    except (KeyError, ValueError) as exc:
        raise DataFormatError(f"bad model file ({exc})", path) from None
    raise DataFormatError(f"unknown model kind {kind!r}", path)


def cmd_predict(cfg: PipelineConfig, model_path, split_path, out, kinds=None) -> Path:
    model = load_model(model_path)
    split = forecast.load_split_manifest(split_path)
    if isinstance(model, qrf.QrfModel):
        bands = pipeline.predict_qrf(model, split, cfg.uq)
    else:
        bands = pipeline.predict_blstm(model, split, cfg.uq, seed=cfg.mc_seed)
    if kinds:
        bands.bands = [b for b in bands.bands if b.kind in kinds]
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    pipeline.write_bands_csv(bands, split, out)
    log.info("wrote %s (%d bands)", out, len(bands.bands))
    return out


def cmd_evaluate(band_csvs, split_paths, out) -> uq.HitRateReport:
    splits = {}
    for p in split_paths:
        s = forecast.load_split_manifest(p)
        splits[s.label] = s
    report = uq.HitRateReport()
    for path in band_csvs:
        bs, _ = pipeline.read_bands_csv(path)
        if bs.dataset not in splits:
            raise DataFormatError(f"no split manifest given for dataset {bs.dataset!r}", path)
        report = report.merged(pipeline.evaluate(bs, splits[bs.dataset]))
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_csv(), encoding="utf-8")
    out.with_suffix(".txt").write_text(report.to_text(), encoding="utf-8")
    log.info("wrote %s and %s", out, out.with_suffix(".txt"))
    return report


def cmd_sorted(band_csv, split_path, out) -> Path:
    bs, _ = pipeline.read_bands_csv(band_csv)
    split = forecast.load_split_manifest(split_path)
    pipeline.write_sorted_csv(pipeline.sorted_table(bs, split), out)
    log.info("wrote %s", out)
    return Path(out)


def cmd_plot(csv_path, out=None, members=None, kind=uq.PER_MEMBER) -> Path:
    out = Path(out) if out is not None else Path(csv_path).with_suffix(".svg")
    path = plotting.plot_csv(csv_path, out, members=members, kind=kind)
    log.info("wrote %s", path)
    return path


def cmd_run_all(cfg: PipelineConfig, out_dir=None) -> uq.HitRateReport:
    """Dataset 1 and Dataset 2, both models, every artifact under ``out_dir``."""
    root = Path(out_dir if out_dir is not None else cfg.io.out_dir)
    data = root / "data"
    t0 = time.perf_counter()
    starts = forecast.dataset2_starts()
    if DATASET1_START not in starts:
        starts.append(DATASET1_START)
    ens_csvs = cmd_synth(cfg, starts, data)
    cmd_impact(cfg, ens_csvs, data)
    bands, manifests = [], []
    for label in ("dataset1", "dataset2"):
        d = root / label
        manifest = cmd_dataset(label, data, d / "split.json")
        manifests.append(manifest)
        for model in ("qrf", "blstm"):
            model_path = cmd_train(cfg, model, manifest, d / f"{model}_model.npz")
            tag = "rfqr" if model == "qrf" else "blstm"
            band_csv = cmd_predict(cfg, model_path, manifest, d / f"bands_{tag}.csv")
            bands.append(band_csv)
            cmd_plot(band_csv, d / f"bands_{tag}.svg", members=cfg.io.plot_members)
            for kind in (uq.AVERAGED, uq.POOLED):
                if model == "qrf" and kind == uq.POOLED:
                    continue
                cmd_plot(band_csv, d / f"bands_{tag}_{kind}.svg", kind=kind)
            sorted_csv = cmd_sorted(band_csv, manifest, d / f"sorted_{tag}.csv")
            cmd_plot(sorted_csv, d / f"sorted_{tag}.svg")
    report = cmd_evaluate(bands, manifests, root / "report.csv")
    log.info("run-all finished in %.1fs", time.perf_counter() - t0)
    return report


# --- argument parsing --------------------------------------------------------

def _day(text: str) -> CalendarDay:
    try:
        return CalendarDay.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _members(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError("members must be comma-separated integers") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("--threads", type=int, help="worker threads, 0 for all cores")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="r0surrogate", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write synthetic ensemble CSVs")
    s.add_argument("--start", type=_day, action="append",
                   help="period start (Jan 1 or Jul 1; repeatable; default: all Dataset 2 periods)")
    s.add_argument("--seed", type=int, help="shorthand for --set forecast.seed=N")
    s.add_argument("--out-dir", default="data")

    s = sub.add_parser("impact", parents=[common], help="run the R0 model on ensemble CSVs")
    s.add_argument("ensembles", nargs="+")
    s.add_argument("--out-dir", help="default: next to each ensemble file")

    s = sub.add_parser("dataset", parents=[common], help="write a train/test split manifest")
    s.add_argument("label", choices=("dataset1", "dataset2"))
    s.add_argument("--data-dir", default="data")
    s.add_argument("--start", type=_day, default=DATASET1_START, help="dataset1 period start")
    s.add_argument("--out", required=True)

    s = sub.add_parser("train", parents=[common], help="fit a surrogate on a split")
    s.add_argument("model", choices=("qrf", "blstm"))
    s.add_argument("--split", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--loss-trace", help="BLSTM loss CSV (default: <out>_loss.csv)")

    s = sub.add_parser("predict", parents=[common], help="quantile bands on the test part")
    s.add_argument("--model", required=True)
    s.add_argument("--split", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--kinds", type=lambda t: t.split(","), help=f"subset of {','.join(uq.BAND_KINDS)}")

    s = sub.add_parser("evaluate", parents=[common], help="hit-rate report from band CSVs")
    s.add_argument("--bands", nargs="+", required=True)
    s.add_argument("--split", nargs="+", required=True, help="manifests of the datasets involved")
    s.add_argument("--out", required=True, help="report CSV; a text table goes next to it")

    s = sub.add_parser("plot", parents=[common], help="SVG figure from a band or sorted CSV")
    s.add_argument("csv")
    s.add_argument("--out", help="default: the CSV path with .svg")
    s.add_argument("--members", type=_members, help="comma-separated member ids")
    s.add_argument("--kind", choices=uq.BAND_KINDS, default=uq.PER_MEMBER)

    s = sub.add_parser("run-all", parents=[common], help="full Dataset 1 + Dataset 2 protocol")
    s.add_argument("--out-dir", help="default: io.out_dir")
    return p


def _run(args) -> int:
    overrides = list(args.overrides)
    if getattr(args, "seed", None) is not None:
        overrides.append(f"forecast.seed={args.seed}")
    cfg = load_config(args.config, overrides)
    if args.threads is not None:
        cfg = cfg.with_threads(args.threads)
    c = args.command
    if c == "synth":
        cmd_synth(cfg, args.start or forecast.dataset2_starts(), args.out_dir)
    elif c == "impact":
        cmd_impact(cfg, args.ensembles, args.out_dir)
    elif c == "dataset":
        cmd_dataset(args.label, args.data_dir, args.out, args.start)
    elif c == "train":
        cmd_train(cfg, args.model, args.split, args.out, args.loss_trace)
    elif c == "predict":
        bad = sorted(set(args.kinds or ()) - set(uq.BAND_KINDS))
        if bad:
            raise ConfigError(f"unknown band kind(s): {', '.join(bad)}")
        cmd_predict(cfg, args.model, args.split, args.out, args.kinds)
    elif c == "evaluate":
        sys.stdout.write(cmd_evaluate(args.bands, args.split, args.out).to_text())
    elif c == "plot":
        cmd_plot(args.csv, args.out, args.members, args.kind)
    elif c == "run-all":
        sys.stdout.write(cmd_run_all(cfg, args.out_dir).to_text())
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return _run(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except (DataFormatError, FileNotFoundError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except ValueError as exc:
        # remaining ValueErrors come from validating input values
        log.error("data error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
