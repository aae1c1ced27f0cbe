"""Sequence datasets, training and Monte Carlo dropout inference for the LSTM surrogate."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ..forecast import PeriodData
from ..parallel import worker_count
from ..timeseries import CalendarDay, date_add
from . import network

log = logging.getLogger(__name__)

WINDOW = 49
FEATURES = ("day_of_month", "month", "precipitation", "temperature", "r0")
R0_FEATURE = FEATURES.index("r0")
FORMAT_VERSION = 1


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class BlstmConfig:
    hidden_size: int = 32
    head_sizes: tuple = (32,)
    learning_rate: float = 0.01
    epochs: int = 200
    batch_size: int = 1024
    dropout_p: float = 0.5
    mc_experiments: int = 200
    seed: int = 0
    grad_clip_norm: float = 5.0
    dtype: str = "float32"
    threads: int = 1
    teacher_forcing: bool = True

    def __post_init__(self):
        object.__setattr__(self, "head_sizes", tuple(int(s) for s in self.head_sizes))
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must lie in [0, 1)")
        for name in ("hidden_size", "epochs", "batch_size", "mc_experiments"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if any(s < 1 for s in self.head_sizes):
            raise ValueError("head layer sizes must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        worker_count(self.threads)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass(frozen=True)
class SequenceSample:
    inputs: np.ndarray
    target: float
    member_id: int
    target_date: CalendarDay


@dataclass(eq=False)
class SequenceSet:
    """Sliding windows of ``WINDOW`` days, each paired with the next day's R0.

    ``inputs`` is ``(S, WINDOW, 5)`` in raw units with columns ``FEATURES``.
    """

    inputs: np.ndarray
    targets: np.ndarray
    member_ids: np.ndarray
    target_dates: list
    period_index: np.ndarray

    def __len__(self) -> int:
        return int(self.targets.shape[0])

    def __getitem__(self, i: int) -> SequenceSample:
        return SequenceSample(self.inputs[i], float(self.targets[i]), int(self.member_ids[i]),
                              self.target_dates[i])


def daily_features(period: PeriodData) -> np.ndarray:
    """``(N, H, 5)`` per-day feature array of a period."""
    ens = period.ensemble
    dom, month = ens.calendar_features()
    n, h = ens.n_members, ens.horizon_days
    out = np.empty((n, h, len(FEATURES)))
    out[:, :, 0] = dom
    out[:, :, 1] = month
    out[:, :, 2] = ens.precipitation
    out[:, :, 3] = ens.temperature
    out[:, :, 4] = period.r0
    return out


def make_sequences(periods: list[PeriodData]) -> SequenceSet:
    """Stride-1 windows inside each (member, period); windows never cross boundaries."""
    inputs, targets, members, dates, pidx = [], [], [], [], []
    for p_i, period in enumerate(periods):
        h = period.ensemble.horizon_days
        if h < WINDOW + 1:
            raise ValueError(f"period starting {period.start} has {h} days; at least "
                             f"{WINDOW + 1} are needed")
        feats = daily_features(period)
        windows = np.lib.stride_tricks.sliding_window_view(feats[:, :-1], WINDOW, axis=1)
        # (N, h - WINDOW, F, WINDOW) -> (N, h - WINDOW, WINDOW, F)
        windows = windows.transpose(0, 1, 3, 2)
        n_win = h - WINDOW
        inputs.append(windows.reshape(-1, WINDOW, len(FEATURES)))
        targets.append(feats[:, WINDOW:, R0_FEATURE].reshape(-1))
        members.append(np.repeat(period.ensemble.member_ids, n_win))
        tdates = [date_add(period.start, WINDOW + k) for k in range(n_win)]
        dates.extend(tdates * period.ensemble.n_members)
        pidx.append(np.full(period.ensemble.n_members * n_win, p_i))
    return SequenceSet(np.ascontiguousarray(np.concatenate(inputs)), np.concatenate(targets),
                       np.concatenate(members), dates, np.concatenate(pidx))


@dataclass
class Normalizer:
    mean: np.ndarray
    sd: np.ndarray
    target_mean: float
    target_sd: float

    @classmethod
    def fit(cls, seqs: SequenceSet) -> "Normalizer":
        flat = seqs.inputs.reshape(-1, seqs.inputs.shape[-1])
        mean = flat.mean(axis=0)
        sd = flat.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        t_sd = float(seqs.targets.std())
        return cls(mean, sd, float(seqs.targets.mean()), t_sd if t_sd > 0 else 1.0)

    def transform(self, inputs: np.ndarray) -> np.ndarray:
        return (inputs - self.mean) / self.sd

    def transform_target(self, y):
        return (np.asarray(y, np.float64) - self.target_mean) / self.target_sd

    def inverse_target(self, z):
        return np.asarray(z, np.float64) * self.target_sd + self.target_mean


@dataclass(eq=False)
class BlstmModel:
    config: BlstmConfig
    params: dict
    normalizer: Normalizer
    loss_trace: list = field(default_factory=list)

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def prepare(self, inputs: np.ndarray) -> np.ndarray:
        """Raw ``(S, WINDOW, F)`` inputs -> normalised time-major network input."""
        return network.time_major(self.normalizer.transform(inputs).astype(self.dtype))

    def predict_deterministic(self, seqs) -> np.ndarray:
        inputs = seqs.inputs if isinstance(seqs, SequenceSet) else np.asarray(seqs)
        out = network.forward(self.params, self.prepare(inputs))
        return self.normalizer.inverse_target(out)

    def save(self, path) -> None:
        arrays = {f"param_{k}": v for k, v in self.params.items()}
        with open(path, "wb") as fh:
            np.savez_compressed(
                fh, format_version=np.int64(FORMAT_VERSION), kind=np.array("blstm"),
                config=np.array(json.dumps(asdict(self.config))),
                norm_mean=self.normalizer.mean, norm_sd=self.normalizer.sd,
                norm_target=np.array([self.normalizer.target_mean, self.normalizer.target_sd]),
                loss_trace=np.asarray(self.loss_trace, np.float64), **arrays)

    @classmethod
    def load(cls, path) -> "BlstmModel":
        with np.load(path, allow_pickle=False) as z:
            if str(z["kind"]) != "blstm" or int(z["format_version"]) != FORMAT_VERSION:
                raise ValueError(f"{path}: not a version-{FORMAT_VERSION} BLSTM model file")
            cfg = json.loads(str(z["config"]))
            cfg["head_sizes"] = tuple(cfg["head_sizes"])
            params = {k[len("param_"):]: z[k] for k in z.files if k.startswith("param_")}
            t = z["norm_target"]
            norm = Normalizer(z["norm_mean"], z["norm_sd"], float(t[0]), float(t[1]))
            return cls(BlstmConfig(**cfg), params, norm, z["loss_trace"].tolist())


def train(seqs: SequenceSet, cfg: BlstmConfig | None = None, progress=None) -> BlstmModel:
    """Fit the network by Adam on minibatch MSE (of z-scored targets), dropout active."""
    cfg = cfg or BlstmConfig()
    if len(seqs) == 0:
        raise ValueError("no training sequences")
    dtype = np.dtype(cfg.dtype)
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0x42_4C_53_54]))
    norm = Normalizer.fit(seqs)
    params = network.init_params(len(FEATURES), cfg.hidden_size, cfg.head_sizes, rng, dtype)
    model = BlstmModel(cfg, params, norm)
    xt = model.prepare(seqs.inputs)
    y = norm.transform_target(seqs.targets).astype(dtype)
    opt = network.Adam(params, cfg.learning_rate)
    pool = network.make_pool(cfg.threads)
    n = len(seqs)
    try:
        for epoch in range(cfg.epochs):
            perm = rng.permutation(n)
            total = 0.0
            for lo in range(0, n, cfg.batch_size):
                idx = np.sort(perm[lo:lo + cfg.batch_size])
                xb = np.ascontiguousarray(xt[:, idx])
                masks = network.dropout_masks(rng, idx.shape[0], params, cfg.dropout_p, dtype)
                loss, grads = network.loss_and_grads(params, xb, y[idx], masks, pool)
                if not np.isfinite(loss):
                    raise NumericalError(f"non-finite training loss at epoch {epoch + 1}; "
                                         f"try a smaller learning_rate or grad_clip_norm")
                network.clip_by_global_norm(grads, cfg.grad_clip_norm)
                opt.step(params, grads)
                total += loss * idx.shape[0]
            model.loss_trace.append(total / n)
            if progress is not None:
                progress(epoch + 1, total / n)
            log.debug("epoch %d mse %.6f", epoch + 1, total / n)
    finally:
        if pool is not None:
            pool.shutdown()
    return model


def experiment_rng(seed: int, experiment: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(experiment)]))


def mc_predict(model: BlstmModel, seqs, m: int | None = None, seed: int = 0,
               experiments=None) -> np.ndarray:
    """``(S, m)`` R0 samples, one column per stochastic forward pass.

    Dropout sits after the recurrent encoder only, so the encoder runs once and
    each experiment redraws the head masks. Experiment ``k`` uses its own
    sub-seed, so passing a permutation of ``experiments`` permutes the columns.
    """
    inputs = seqs.inputs if isinstance(seqs, SequenceSet) else np.asarray(seqs)
    if experiments is None:
        m = model.config.mc_experiments if m is None else int(m)
        if m < 1:
            raise ValueError("need at least one experiment")
        experiments = range(m)
    experiments = list(experiments)
    h = network.encode(model.params, model.prepare(inputs))
    out = np.empty((h.shape[0], len(experiments)))
    for col, k in enumerate(experiments):
        masks = network.dropout_masks(experiment_rng(seed, k), h.shape[0], model.params,
                                      model.config.dropout_p, model.dtype)
        out[:, col] = model.normalizer.inverse_target(network.head(model.params, h, masks))
    return out


def rollout_predict(model: BlstmModel, period: PeriodData, m: int | None = None,
                    seed: int = 0) -> np.ndarray:
    """Autoregressive alternative to teacher forcing.

    Each of the ``m`` experiments of each member starts from the first
    ``WINDOW`` true R0 values and then feeds its own sampled predictions back
    as the lagged R0 input. Returns ``(N, m, H - WINDOW)`` samples.
    """
    m = model.config.mc_experiments if m is None else int(m)
    feats = daily_features(period)
    n, h, _ = feats.shape
    if h < WINDOW + 1:
        raise ValueError("period too short for a rollout")
    paths = np.repeat(feats[:, None], m, axis=1).reshape(n * m, h, -1)
    rng = experiment_rng(seed, 0x524F4C4C)
    out = np.empty((n * m, h - WINDOW))
    for step in range(h - WINDOW):
        window = paths[:, step:step + WINDOW]
        hid = network.encode(model.params, model.prepare(window))
        masks = network.dropout_masks(rng, hid.shape[0], model.params, model.config.dropout_p,
                                      model.dtype)
        pred = np.maximum(model.normalizer.inverse_target(network.head(model.params, hid, masks)),
                          0.0)
        out[:, step] = pred
        paths[:, WINDOW + step, R0_FEATURE] = pred
    return out.reshape(n, m, h - WINDOW)
