"""Run configuration: one schema-versioned file covering every stage.

Unknown keys are rejected with their full path (typo safety); every
default is visible on the dataclasses below and echoed in README.md.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json

from . import dsp, mixgen, sepnet

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


def _from_dict(cls, obj, path):
    if obj is None:
        obj = {}
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected an object, got {type(obj).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(obj) - set(fields)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in obj.items():
        kwargs[name] = _tuplize(value) if isinstance(value, list) else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _tuplize(value):
    if isinstance(value, list):
        return tuple(_tuplize(v) for v in value)
    return value


@dataclasses.dataclass(frozen=True)
class StftSection:
    sample_rate: int = 16000
    n_fft: int = 512
    win_length: int = 512
    hop: int = 256


@dataclasses.dataclass(frozen=True)
class ArraySection:
    positions: tuple = (0.0, 0.04, 0.10, 0.18)
    sound_speed: float = 343.0
    pairs: tuple = ((0, 1), (0, 2), (0, 3))


@dataclasses.dataclass(frozen=True)
class MixSection:
    n_scenes: int = 240
    n_samples: int = 16128
    sir_db: float = 0.0
    overlap: float = 0.85
    seed: int = 123
    ratios: tuple = (0.9, 0.05, 0.05)


@dataclasses.dataclass(frozen=True)
class ModelSection:
    tcn_blocks: int = 2
    convs_per_block: int = 4
    bottleneck: int = 64
    hidden: int = 128
    kernel: int = 3
    mask_activation: str = "linear"
    ipd_encoding: str = "trig"  # or "raw"


@dataclasses.dataclass(frozen=True)
class TrainSection:
    steps: int = 1500
    batch_size: int = 4
    lr: float = 1e-3
    clip_norm: float = 5.0
    seed: int = 0
    phases: tuple = ()  # optional ((steps, lr, batch_size), ...) decay schedule


@dataclasses.dataclass(frozen=True)
class QuantSection:
    candidates: tuple = (2, 4, 8, 16)
    scale_method: str = "mse"  # or "absmax"
    granularity: str = "sublayer"  # or "block"


@dataclasses.dataclass(frozen=True)
class SensitivitySection:
    m: int = 8  # Hutchinson probes per cluster
    seed: int = 0
    probe_scenes: int = 4  # KL probe set size
    probe_split: str = "train"  # KL probe split; "val" calibrates on held-out scenes
    hes_probe_scenes: int = 0  # 0: use probe_scenes (HVP cost scales with probe size)
    hes_probe_split: str = "train"  # the curvature is measured on training data
    sampler: str = "rademacher"  # or "gaussian"
    loss: str = "sisnr"  # or "spec_mse"


@dataclasses.dataclass(frozen=True)
class AllocSection:
    budgets: tuple = (4.0, 8.0)  # average bits


@dataclasses.dataclass(frozen=True)
class NasSection:
    beta: float = 0.5
    lr: float = 1e-2
    steps: int = 400
    batch_size: int = 2
    seed: int = 0
    max_rounds: int = 5
    mixing: str = "weight"  # or "output"
    probe_scenes: int = 8


@dataclasses.dataclass(frozen=True)
class EvalSection:
    cap_db: float = 60.0
    timing_runs: int = 3


@dataclasses.dataclass(frozen=True)
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    stft: StftSection = dataclasses.field(default_factory=StftSection)
    array: ArraySection = dataclasses.field(default_factory=ArraySection)
    mixgen: MixSection = dataclasses.field(default_factory=MixSection)
    model: ModelSection = dataclasses.field(default_factory=ModelSection)
    train: TrainSection = dataclasses.field(default_factory=TrainSection)
    quant: QuantSection = dataclasses.field(default_factory=QuantSection)
    sensitivity: SensitivitySection = dataclasses.field(default_factory=SensitivitySection)
    alloc: AllocSection = dataclasses.field(default_factory=AllocSection)
    nas: NasSection = dataclasses.field(default_factory=NasSection)
    eval: EvalSection = dataclasses.field(default_factory=EvalSection)

    # -- derived module configs ------------------------------------------------

    def stft_config(self):
        try:
            return dsp.StftConfig(
                sample_rate=self.stft.sample_rate,
                n_fft=self.stft.n_fft,
                win_length=self.stft.win_length,
                hop=self.stft.hop,
            )
        except dsp.ConfigError as exc:
            raise ConfigError(f"stft: {exc}") from exc

    def mix_config(self):
        return mixgen.MixGenConfig(
            sample_rate=self.stft.sample_rate,
            n_samples=self.mixgen.n_samples,
            sir_db=self.mixgen.sir_db,
            overlap=self.mixgen.overlap,
            mic_positions=self.array.positions,
            sound_speed=self.array.sound_speed,
            pairs=self.array.pairs,
        )

    def sep_config(self):
        return sepnet.SepConfig(
            n_bins=self.stft.n_fft // 2 + 1,
            n_pairs=len(self.array.pairs),
            tcn_blocks=self.model.tcn_blocks,
            convs_per_block=self.model.convs_per_block,
            bottleneck=self.model.bottleneck,
            hidden=self.model.hidden,
            kernel=self.model.kernel,
            mask_activation=self.model.mask_activation,
            ipd_encoding=self.model.ipd_encoding,
        )

    def train_config(self):
        return sepnet.TrainConfig(
            steps=self.train.steps,
            batch_size=self.train.batch_size,
            lr=self.train.lr,
            clip_norm=self.train.clip_norm,
            seed=self.train.seed,
            phases=self.train.phases,
        )


def from_dict(obj):
    obj = dict(obj or {})
    version = obj.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}, expected {SCHEMA_VERSION}")
    sections = {
        "stft": StftSection,
        "array": ArraySection,
        "mixgen": MixSection,
        "model": ModelSection,
        "train": TrainSection,
        "quant": QuantSection,
        "sensitivity": SensitivitySection,
        "alloc": AllocSection,
        "nas": NasSection,
        "eval": EvalSection,
    }
    unknown = set(obj) - set(sections)
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    kwargs = {name: _from_dict(cls, obj.get(name), name) for name, cls in sections.items()}
    cfg = RunConfig(schema_version=SCHEMA_VERSION, **kwargs)
    cfg.stft_config()  # surface COLA violations at load time
    try:
        cfg.sep_config()
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from exc
    return cfg


def load(path):
    with open(path) as f:
        try:
            obj = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(obj)


def to_dict(cfg):
    return dataclasses.asdict(cfg)


def config_hash(cfg):
    return hashlib.sha256(
        json.dumps(to_dict(cfg), sort_keys=True, default=list).encode()
    ).hexdigest()


def replace(cfg, **section_updates):
    """Return a copy with whole sections replaced (helper for tests/pipeline)."""
    return dataclasses.replace(cfg, **section_updates)
