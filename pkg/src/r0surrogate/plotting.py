"""SVG figures of quantile bands: band vs time per member, and bands sorted by true R0."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import uq  # noqa: E402
from .forecast import DataFormatError  # noqa: E402
from .pipeline import SORTED_COLUMNS, read_bands_csv, read_sorted_csv  # noqa: E402

BAND_COLOR = "tab:red"
TARGET_COLOR = "tab:blue"

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "legend.fontsize": 7,
    "axes.spines.top": False,
    "axes.spines.right": False,
    # fixed id salt and no timestamp so reruns give identical files
    "svg.hashsalt": "r0surrogate",
    # keep labels as text elements rather than glyph outlines
    "svg.fonttype": "none",
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _panel_band(ax, days, lower, upper, target_days, targets, title):
    ax.fill_between(days, lower, upper, color=BAND_COLOR, alpha=0.35, linewidth=0,
                    label="predicted quantile range")
    ax.plot(days, lower, color=BAND_COLOR, linewidth=0.6)
    ax.plot(days, upper, color=BAND_COLOR, linewidth=0.6)
    if len(targets):
        ax.plot(target_days, targets, ".", color=TARGET_COLOR, markersize=2.5, label="target")
    ax.set_title(title)
    # per-axis rotation; autofmt_xdate would strip the labels of all but the last panel
    ax.tick_params(axis="x", labelrotation=30)
    ax.set_xlabel("date")
    ax.set_ylabel("R0")


def plot_band_series(bandset, targets: dict, path, members=None,
                     kind: str = uq.PER_MEMBER, title: str | None = None) -> Path:
    """One panel per band of ``kind``: the band in red, true R0 as blue dots.

    For combined kinds every member's target on a band date is drawn.
    """
    bands = bandset.of_kind(kind)
    if kind == uq.PER_MEMBER and members is not None:
        wanted = {int(m) for m in members}
        bands = [b for b in bands if b.member_id in wanted]
    if not bands:
        raise DataFormatError(f"no {kind} bands to plot")
    bands.sort(key=lambda b: (b.member_id if b.member_id is not None else -1, b.dates[0]))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(bands), 1, figsize=(7.0, 2.1 * len(bands)), squeeze=False)
        for k, (ax, b) in enumerate(zip(axes[:, 0], bands), start=1):
            ax.set_gid(f"panel{k}")
            days = [d.to_date() for d in b.dates]
            if kind == uq.PER_MEMBER:
                pts = [(d.to_date(), targets[(b.member_id, d)]) for d in b.dates
                       if (b.member_id, d) in targets]
                name = f"member {b.member_id}"
            else:
                on = set(b.dates)
                pts = sorted((d.to_date(), v) for (m, d), v in targets.items()
                             if m is not None and d in on)
                name = f"{uq.BAND_LABELS[kind]} from {b.dates[0]}"
            td = [p[0] for p in pts]
            tv = [p[1] for p in pts]
            _panel_band(ax, days, b.lower, b.upper, td, tv, name)
        axes[0, 0].legend(loc="upper right", frameon=False)
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_sorted(table: dict, path, title: str | None = None) -> Path:
    """Bands of every test row, ordered by true R0 (targets form a rising curve)."""
    rank = np.asarray(table["rank"])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(7.0, 3.0))
        ax.set_gid("panel1")
        ax.fill_between(rank, table["lower"], table["upper"], color=BAND_COLOR, alpha=0.35,
                        linewidth=0, step="mid", label="predicted quantile range")
        ax.plot(rank, table["target"], color=TARGET_COLOR, linewidth=1.0, label="target")
        ax.set_xlabel("sample (sorted by target)")
        ax.set_ylabel("R0")
        ax.legend(loc="upper left", frameon=False)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def csv_kind(path) -> str:
    """``"bands"`` or ``"sorted"``, judged from the header."""
    try:
        with open(path, encoding="utf-8") as fh:
            first = fh.readline()
            if first.startswith("#"):
                first = fh.readline()
    except OSError as exc:
        raise DataFormatError(f"cannot read ({exc.strerror})", path) from None
    cols = first.strip().split(",")
    if cols[:len(SORTED_COLUMNS)] == list(SORTED_COLUMNS):
        return "sorted"
    if cols and cols[0] == "band_kind":
        return "bands"
    raise DataFormatError("not a band or sorted-band CSV", path, 1)


def plot_csv(path, out, members=None, kind: str = uq.PER_MEMBER) -> Path:
    if csv_kind(path) == "sorted":
        return plot_sorted(read_sorted_csv(path), out, title=Path(path).stem)
    bs, targets = read_bands_csv(path)
    return plot_band_series(bs, targets, out, members=members, kind=kind,
                            title=f"{bs.model}, {bs.dataset}")
