"""Dataclass configs for every trainable component plus the top-level run.

Defaults here are the pinned "default pipeline" values; tests assert
against them, so changing a default is a contract change.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .errors import ConfigError
from .utils import canonical_json, sha256_bytes

CONDITION_EXTRACTED = "extracted"
CONDITION_TEACHER_FORCED = "ttv_teacher_forced"


@dataclass
class CorpusConfig:
    seed: int = 7
    n_train_speakers: int = 16
    n_heldout_speakers: int = 4
    n_train: int = 400
    n_val: int = 50
    n_test: int = 50

    def validate(self) -> None:
        if self.n_train_speakers < 1:
            raise ConfigError("corpus.n_train_speakers must be >= 1")
        if self.n_heldout_speakers < 1:
            raise ConfigError("corpus.n_heldout_speakers must be >= 1")
        if self.n_train_speakers + self.n_heldout_speakers < 2:
            raise ConfigError("corpus.n_speakers must be >= 2 in total")
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 1:
                raise ConfigError(f"corpus.{name} must be >= 1")


@dataclass
class TTVConfig:
    hidden: int = 64
    epochs: int = 40
    batch_size: int = 16
    lr: float = 2e-4
    lambda_kl: float = 0.1
    lambda_dur: float = 0.5
    lambda_f0: float = 0.5
    grad_clip: float = 5.0
    temperature: float = 0.0


@dataclass
class SynthConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 2e-4
    crop_frames: int = 16           # video frames per training crop
    fft_sizes: tuple = (128, 256, 512)
    wave_l1_weight: float = 0.1
    speaker_aux_weight: float = 0.1
    grad_clip: float = 5.0


@dataclass
class ExpertsConfig:
    batch_size: int = 32
    sync_epochs: int = 12
    sync_lr: float = 1e-3
    sync_floor: float = 0.9         # val AUC, in-sync vs |offset| >= 10
    identity_epochs: int = 6
    identity_lr: float = 1e-3
    identity_floor: float = 0.8     # val same-vs-cross AUC
    speaker_epochs: int = 10
    speaker_lr: float = 1e-3
    speaker_floor: float = 0.8      # val same-vs-cross AUC
    landmark_epochs: int = 10
    landmark_lr: float = 1e-3
    landmark_floor: float = 1.5     # max val mean error, px
    recognizer_epochs: int = 10
    recognizer_lr: float = 1e-3
    recognizer_floor: float = 0.05  # max val TER
    perceptual_seed: int = 101


@dataclass
class TFGConfig:
    stage1_epochs: int = 30
    stage2_epochs: int = 10
    stage1_lr: float = 1e-4
    stage2_lr: float = 2e-5
    disc_lr: float = 1e-4
    batch_size: int = 16
    windows_per_utterance: int = 1
    pixel_weight: float = 10.0
    perceptual_weight: float = 1.0
    adv_weight: float = 0.1
    sync_weight_stage1: float = 0.3
    sync_weight_stage2: float = 0.03
    sync_tau: float = 0.1
    guard_accuracy: float = 0.98
    guard_steps: int = 200


@dataclass
class EvalConfig:
    max_offset: int = 15            # LSE offset search, video frames
    pairing_seed: int = 13          # cross-test derangement
    fid_min_frames: int = 64


@dataclass
class RunConfig:
    seed: int = 0
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    ttv: TTVConfig = field(default_factory=TTVConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    experts: ExpertsConfig = field(default_factory=ExpertsConfig)
    tfg: TFGConfig = field(default_factory=TFGConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    stage1_condition_source: str = CONDITION_EXTRACTED
    stage2_condition_source: str = CONDITION_TEACHER_FORCED
    stage2_duration_source: str = "corpus"  # or "mas"

    def validate(self) -> None:
        self.corpus.validate()
        if self.stage1_condition_source != CONDITION_EXTRACTED:
            raise ConfigError("stage1_condition_source must be 'extracted'")
        if self.stage2_condition_source != CONDITION_TEACHER_FORCED:
            raise ConfigError("stage2_condition_source must be 'ttv_teacher_forced'")
        if self.stage2_duration_source not in ("corpus", "mas"):
            raise ConfigError("stage2_duration_source must be 'corpus' or 'mas'")

    def to_dict(self) -> dict:
        return _as_jsonable(dataclasses.asdict(self))

    def config_hash(self) -> str:
        return sha256_bytes(canonical_json(self.to_dict()).encode())

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _dataclass_from_dict(cls, data)


def _as_jsonable(obj):
    if isinstance(obj, dict):
        return {k: _as_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_as_jsonable(v) for v in obj]
    return obj


def _dataclass_from_dict(cls, data):
    if not dataclasses.is_dataclass(cls):
        return data
    kwargs = {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown config field: {cls.__name__}.{key}")
        ftype = fields[key].type
        nested = _NESTED.get((cls.__name__, key))
        if nested is not None and isinstance(value, dict):
            kwargs[key] = _dataclass_from_dict(nested, value)
        elif key == "fft_sizes":
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
        del ftype
    return cls(**kwargs)


_NESTED = {
    ("RunConfig", "corpus"): CorpusConfig,
    ("RunConfig", "ttv"): TTVConfig,
    ("RunConfig", "synth"): SynthConfig,
    ("RunConfig", "experts"): ExpertsConfig,
    ("RunConfig", "tfg"): TFGConfig,
    ("RunConfig", "eval"): EvalConfig,
}


def apply_overrides(config: RunConfig, overrides: dict) -> RunConfig:
    """Merge a (possibly nested) dict of overrides into a RunConfig."""
    data = config.to_dict()

    def merge(dst, src, prefix):
        for key, value in src.items():
            if key not in dst:
                raise ConfigError(f"unknown config field: {prefix}{key}")
            if isinstance(value, dict) and isinstance(dst[key], dict):
                merge(dst[key], value, f"{prefix}{key}.")
            else:
                dst[key] = value

    merge(data, overrides, "")
    return RunConfig.from_dict(data)
