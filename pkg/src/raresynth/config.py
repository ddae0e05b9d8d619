"""Pipeline configuration: one JSON document, versioned, with two shipped profiles.

``desk`` is the CPU-sized default. ``paper`` holds the full-scale reference
hyperparameters (adapter rank 64, alpha 8, dropout 0.08, 200 steps at lr 5e-3,
a ~1,000-image pool at 512 px, the full ratio grid) and is meant as
documentation; it is not expected to run on a laptop.

Unknown keys are rejected; missing keys take the profile default.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .classifier import TrainConfig
from .data import DOMAINS, DomainParams
from .diffusion import DiffusionTrainConfig, SamplerConfig, UNetSpec
from .errors import FormatError, InvalidArgument
from .io import dump_json
from .lora import LoRAConfig

SCHEMA_VERSION = 1
PROFILE_ENV = "RARESYNTH_PROFILE"
PROFILES = ("desk", "paper")


@dataclass
class DataConfig:
    domain: str = "tilecrack"
    params: DomainParams = field(default_factory=DomainParams)
    n_neg: int = 1000
    n_pos: int = 50
    n_lora: int = 50
    test_fraction: float = 0.2
    n_pretrain: int = 2000
    pretrain_pos_fraction: float = 0.3


@dataclass
class DiffusionConfig:
    T: int = 1000
    schedule: str = "linear"
    widths: tuple[int, ...] = (16, 32, 64)
    n_res: int = 2
    train: DiffusionTrainConfig = field(default_factory=lambda: DiffusionTrainConfig(steps=2000))

    def unet_spec(self, image_size: int) -> UNetSpec:
        return UNetSpec(tuple(self.widths), self.n_res, image_size)


@dataclass
class GenerateConfig:
    # desk default: the top of the 1.5-2.5 guidance range; at 2.0 the small
    # generator's cracks come out too faint to help the classifier
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(guidance_scale=2.5))
    pool_size: int = 200
    seed0: int = 1_000_000
    batch_size: int = 50


@dataclass
class SweepConfig:
    ratios: tuple[float, ...] = (0.0, 0.5, 1.0, 2.0, 4.0)
    include_synth_only: bool = True
    folds: int = 5
    seeds: tuple[int, ...] = (0,)
    threshold: float = 0.5
    refit_lora_per_fold: bool = False
    record_wall_time: bool = False

    def __post_init__(self):
        self.ratios = tuple(float(r) for r in self.ratios)
        self.seeds = tuple(int(s) for s in self.seeds)
        if any(r < 0 for r in self.ratios):
            raise InvalidArgument("ratios must be non-negative")
        if list(self.ratios) != sorted(self.ratios):
            raise InvalidArgument("ratios must be sorted ascending")
        if len(set(self.ratios)) != len(self.ratios):
            raise InvalidArgument("ratios must be distinct")
        if not self.seeds:
            raise InvalidArgument("at least one seed is required")
        if not 0.0 <= self.threshold <= 1.0:
            raise InvalidArgument("threshold must be in [0, 1]")


@dataclass
class DiversityConfig:
    max_pairs: int = 2000
    delta_psnr: float = 3.0
    collapse_std_ratio: float = 0.25
    bins: int = 20


@dataclass
class PipelineConfig:
    schema_version: int = SCHEMA_VERSION
    profile: str = "desk"
    seed: int = 0
    out_dir: str = "runs/desk"
    data: DataConfig = field(default_factory=DataConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    lora: LoRAConfig = field(default_factory=LoRAConfig)
    generate: GenerateConfig = field(default_factory=GenerateConfig)
    classifier: TrainConfig = field(default_factory=TrainConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    diversity: DiversityConfig = field(default_factory=DiversityConfig)

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise FormatError(f"unsupported config schema_version {self.schema_version}; expected {SCHEMA_VERSION}")
        if self.data.domain not in DOMAINS:
            raise InvalidArgument(f"unknown domain {self.data.domain!r}; expected one of {DOMAINS}")

    @property
    def image_size(self) -> int:
        return self.data.params.image_size

    def to_dict(self) -> dict:
        return _to_jsonable(dataclasses.asdict(self))

    def to_json(self) -> str:
        return dump_json(self.to_dict())

    def replace(self, **changes) -> "PipelineConfig":
        return from_dict({**self.to_dict(), **changes})


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


def _build(cls, data: dict, base, path: str):
    if not isinstance(data, dict):
        raise FormatError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise FormatError(f"{path or 'config'}: unknown keys {unknown}")
    kwargs = {}
    for name, f in known.items():
        current = getattr(base, name)
        if name not in data:
            kwargs[name] = current
            continue
        value = data[name]
        sub = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), value, current, sub)
        elif isinstance(current, tuple):
            if not isinstance(value, list):
                raise FormatError(f"{sub}: expected a list")
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise FormatError(f"{path or 'config'}: {e}") from e


def profile_defaults(profile: str | None = None) -> PipelineConfig:
    profile = profile or os.environ.get(PROFILE_ENV, "desk")
    if profile not in PROFILES:
        raise InvalidArgument(f"unknown profile {profile!r}; expected one of {PROFILES}")
    cfg = PipelineConfig()
    if profile == "paper":
        cfg = PipelineConfig(
            profile="paper",
            out_dir="runs/paper",
            data=DataConfig(params=DomainParams(image_size=512)),
            diffusion=DiffusionConfig(widths=(32, 64, 128), n_res=2, train=DiffusionTrainConfig(steps=3000)),
            lora=LoRAConfig(rank=64, alpha=8.0, dropout=0.08, steps=200, lr=5e-3),
            generate=GenerateConfig(sampler=SamplerConfig(steps=24, guidance_scale=2.0), pool_size=1000),
            sweep=SweepConfig(ratios=(0.0, 0.5, 1.0, 2.0, 4.0, 10.0, 20.0), include_synth_only=True, folds=5),
        )
    return cfg


def from_dict(data: dict, profile: str | None = None) -> PipelineConfig:
    prof = data.get("profile", profile) if isinstance(data, dict) else profile
    base = profile_defaults(prof)
    return _build(PipelineConfig, data, base, "")


def load_config(path: str | os.PathLike | None, profile: str | None = None) -> PipelineConfig:
    if path is None:
        return profile_defaults(profile)
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config not found: {p}")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{p}: invalid JSON ({e})") from e
    return from_dict(data, profile)

