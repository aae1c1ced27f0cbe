"""Pipeline configuration: one section per stage, JSON on disk, ``section.key=value`` overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .blstm import BlstmConfig
from .forecast import SynthConfig
from .impact import TransmissionParams
from .qrf import QrfConfig
from .uq import QuantileLevels


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class IoConfig:
    out_dir: str = "run"
    plot_members: tuple = (36, 37, 38)
    # LSTM batch size for the multi-period dataset; the blstm section holds the dataset1 value
    dataset2_batch_size: int = 4096

    def __post_init__(self):
        object.__setattr__(self, "plot_members", tuple(int(m) for m in self.plot_members))
        if self.dataset2_batch_size < 1:
            raise ValueError("dataset2_batch_size must be >= 1")


SECTIONS = {
    "forecast": SynthConfig,
    "impact": TransmissionParams,
    "qrf": QrfConfig,
    "blstm": BlstmConfig,
    "uq": QuantileLevels,
    "io": IoConfig,
}
# sections whose ``seed`` follows the top-level seed unless set explicitly
SEEDED = ("forecast", "qrf", "blstm")


@dataclass(frozen=True)
class PipelineConfig:
    forecast: SynthConfig = field(default_factory=SynthConfig)
    impact: TransmissionParams = field(default_factory=TransmissionParams)
    qrf: QrfConfig = field(default_factory=QrfConfig)
    blstm: BlstmConfig = field(default_factory=BlstmConfig)
    uq: QuantileLevels = field(default_factory=QuantileLevels)
    io: IoConfig = field(default_factory=IoConfig)
    seed: int | None = None

    def blstm_for(self, dataset: str) -> BlstmConfig:
        if dataset == "dataset2":
            return replace(self.blstm, batch_size=self.io.dataset2_batch_size)
        return self.blstm

    @property
    def mc_seed(self) -> int:
        """Seed of the MC-dropout inference streams, kept apart from the training stream."""
        return int(self.blstm.seed) + 1_000_003

    def with_threads(self, threads: int) -> "PipelineConfig":
        if threads < 0:
            raise ConfigError("--threads must be >= 0 (0 means all cores)")
        return replace(self, qrf=replace(self.qrf, n_jobs=threads),
                       blstm=replace(self.blstm, threads=threads))

    def to_dict(self) -> dict:
        out = {name: _plain(asdict(getattr(self, name))) for name in SECTIONS}
        out["seed"] = self.seed
        return out


def _plain(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def from_dict(doc: dict) -> PipelineConfig:
    """Build a config from a nested mapping; unknown sections or keys are rejected."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - set(SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    seed = doc.get("seed")
    if seed is not None and (not isinstance(seed, int) or isinstance(seed, bool) or seed < 0):
        raise ConfigError("seed must be a nonnegative integer")
    kwargs = {"seed": seed}
    for name, cls in SECTIONS.items():
        sec = doc.get(name, {})
        if not isinstance(sec, dict):
            raise ConfigError(f"section {name!r} must be an object")
        allowed = {f.name for f in fields(cls)}
        bad = sorted(set(sec) - allowed)
        if bad:
            raise ConfigError(f"unknown key(s) in section {name!r}: {', '.join(bad)} "
                              f"(allowed: {', '.join(sorted(allowed))})")
        sec = dict(sec)
        if seed is not None and name in SEEDED and "seed" not in sec:
            sec["seed"] = seed
        try:
            kwargs[name] = cls(**sec)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"section {name!r}: {exc}") from None
    return PipelineConfig(**kwargs)


def parse_override(text: str) -> tuple[list[str], object]:
    """``section.key=value`` (or ``seed=value``); the value is read as JSON, else kept as a string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    key, raw = text.split("=", 1)
    path = key.strip().split(".")
    if not all(path) or len(path) > 2 or (len(path) == 1 and path[0] != "seed"):
        raise ConfigError(f"override key {key!r} must be section.key or seed")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path, value


def apply_overrides(doc: dict, overrides) -> dict:
    doc = json.loads(json.dumps(doc))
    for text in overrides or ():
        path, value = parse_override(text)
        if len(path) == 1:
            doc["seed"] = value
        else:
            sec = doc.setdefault(path[0], {})
            if not isinstance(sec, dict):
                raise ConfigError(f"section {path[0]!r} must be an object")
            sec[path[1]] = value
    return doc


def load_config(path=None, overrides=None) -> PipelineConfig:
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path} ({exc.strerror})") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return from_dict(apply_overrides(doc, overrides))
