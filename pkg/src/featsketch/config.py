"""Experiment configuration: YAML in, validated dataclasses out.

An empty file yields the full-scale defaults (18-entry schedule, 7200
iterations with a 1600-iteration initial stage, learning rate 0.00014 and
loss weights 200 / 1.2 / 120 / 1). Unknown keys are rejected.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from .errors import ConfigError, ScheduleError, ValidationError
from .fusion import AblationFlags
from .generator_tap import FeatureSchedule, InverterConfig, build_toy_generator, default_schedule, toy_schedule
from .losses import LossWeights
from .parsing import DEFAULT_PARTS, DEFAULT_REGIONS, PALETTE, PART_GROUPS
from .trainer import ModelConfig, TrainConfig

SCHEDULE_PRESETS = {"full": default_schedule, "toy": toy_schedule}


@dataclass(frozen=True)
class InversionSettings:
    encoder: Optional[str] = None
    refine_steps: int = 200
    refine_lr: float = 0.01
    pixel_w: float = 1.0
    perceptual_w: float = 0.8


@dataclass(frozen=True)
class AdapterSettings:
    generator: str = "toy"
    generator_seed: int = 0
    style_dim: int = 32
    parser: str = "stub"
    perceptual: str = "stub"
    embedding: str = "stub"
    metrics: dict = field(default_factory=lambda: {"l1": "stub"})


@dataclass(frozen=True)
class PathSettings:
    dataset: Optional[str] = None
    checkpoints: str = "checkpoints"
    log: Optional[str] = None


@dataclass
class ExperimentConfig:
    schedule: FeatureSchedule = field(default_factory=default_schedule)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    regions: object = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_REGIONS.items()})
    parts: list = field(default_factory=lambda: list(DEFAULT_PARTS))
    inversion: InversionSettings = field(default_factory=InversionSettings)
    adapters: AdapterSettings = field(default_factory=AdapterSettings)
    paths: PathSettings = field(default_factory=PathSettings)

    def validate(self):
        try:
            self.schedule.validate()
        except ScheduleError as exc:
            raise ValidationError(f"schedule: {exc}", ["schedule"]) from exc
        self.train.validate()
        known = set(PALETTE.values()) | set(PART_GROUPS) | {"*"}
        if self.regions != "fgbg":
            if not isinstance(self.regions, dict) or not self.regions:
                raise ValidationError("regions must be a non-empty mapping or 'fgbg'", ["regions"])
            for name, members in self.regions.items():
                bad = [m for m in members if m not in known]
                if bad:
                    raise ValidationError(f"region {name!r} references unknown labels {bad}", ["regions"])
        bad = [p for p in self.parts if p not in known - {"*"}]
        if bad:
            raise ValidationError(f"unknown perceptual parts {bad}", ["parts"])
        if self.inversion.refine_steps < 0 or not self.inversion.refine_lr > 0:
            raise ValidationError("inversion needs refine_steps >= 0 and refine_lr > 0", ["inversion"])
        return self

    def to_dict(self):
        return {
            "schedule": self.schedule.to_dict(),
            "train": self.train.to_dict(),
            "model": self.model.to_dict(),
            "regions": self.regions if self.regions == "fgbg" else {k: list(v) for k, v in self.regions.items()},
            "parts": list(self.parts),
            "inversion": asdict(self.inversion),
            "adapters": asdict(self.adapters),
            "paths": asdict(self.paths),
        }

    def dump(self, path=None):
        text = yaml.safe_dump(self.to_dict(), sort_keys=False)
        if path is not None:
            Path(path).write_text(text)
        return text

    # -- adapter construction ------------------------------------------------

    def build_generator_handle(self):
        spec = self.adapters.generator
        if spec == "toy":
            return build_toy_generator(self.schedule, self.adapters.generator_seed, self.adapters.style_dim)
        from .adapters import import_object
        from .errors import AdapterError

        try:
            handle = import_object(spec)(self.schedule)
        except AdapterError:
            raise
        except Exception as exc:
            raise AdapterError(f"generator adapter {spec!r} failed: {exc}") from exc
        return handle

    def build_adapters(self):
        from .adapters import load_adapter
        from .parsing import load_parser
        from .trainer import Adapters

        return Adapters(
            parser=load_parser(self.adapters.parser),
            featnet=load_adapter(self.adapters.perceptual, "perceptual"),
            embednet=load_adapter(self.adapters.embedding, "embedding"),
        )

    def build_inverter(self, featnet=None):
        encoder = None
        if self.inversion.encoder:
            from .adapters import import_object

            encoder = import_object(self.inversion.encoder)()
        inv = self.inversion
        return InverterConfig(encoder, inv.refine_steps, inv.refine_lr, inv.pixel_w, inv.perceptual_w, featnet)


def _strict(section, data, cls):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ValidationError(f"section {section!r} must be a mapping", [section])
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {unknown}")
    return data


def _number(section, key, value, kind):
    try:
        out = kind(value)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{section}.{key} must be a {kind.__name__}, got {value!r}", [f"{section}.{key}"]) from exc
    if kind is float and not math.isfinite(out):
        raise ValidationError(f"{section}.{key} must be finite", [f"{section}.{key}"])
    return out


def _weights(section, data, default):
    data = _strict(section, data, LossWeights)
    merged = {**asdict(default), **{k: _number(section, k, v, float) for k, v in data.items()}}
    try:
        return LossWeights(**merged)
    except ConfigError as exc:
        raise ValidationError(f"{section}: {exc}", [section]) from exc


def _schedule(data):
    if data is None:
        return default_schedule()
    if isinstance(data, str):
        if data not in SCHEDULE_PRESETS:
            raise ValidationError(f"unknown schedule preset {data!r}", ["schedule"])
        return SCHEDULE_PRESETS[data]()
    data = _strict("schedule", data, FeatureSchedule)
    if "entries" not in data:
        raise ValidationError("schedule.entries is required", ["schedule.entries"])
    return FeatureSchedule.from_dict(data)


def _inversion(data):
    data = dict(_strict("inversion", data, InversionSettings))
    for k, v in data.items():
        if k == "refine_steps":
            data[k] = _number("inversion", k, v, int)
        elif k != "encoder":
            data[k] = _number("inversion", k, v, float)
    return InversionSettings(**data)


def config_from_dict(raw):
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ValidationError("config root must be a mapping", ["<root>"])
    _strict("<root>", raw, ExperimentConfig)

    train_raw = dict(_strict("train", raw.get("train"), TrainConfig))
    int_keys = ("total_iters", "stage1_iters", "batch_size", "seed", "checkpoint_every")
    train_kw = {}
    for k, v in train_raw.items():
        if k in int_keys:
            train_kw[k] = _number("train", k, v, int)
        elif k in ("lr", "aug_p"):
            train_kw[k] = _number("train", k, v, float)
        elif k == "betas":
            train_kw[k] = tuple(_number("train", k, b, float) for b in v)
        elif k == "weights_stage1":
            train_kw[k] = _weights("train.weights_stage1", v, TrainConfig.weights_stage1)
        elif k == "weights_stage2":
            train_kw[k] = _weights("train.weights_stage2", v, TrainConfig.weights_stage2)
    train = TrainConfig(**train_kw)

    model_raw = dict(_strict("model", raw.get("model"), ModelConfig))
    for k, v in model_raw.items():
        if k != "ablation":
            model_raw[k] = _number("model", k, v, int)
    if "ablation" in model_raw:
        abl = _strict("model.ablation", model_raw["ablation"], AblationFlags)
        try:
            model_raw["ablation"] = AblationFlags(**abl)
        except ConfigError as exc:
            raise ValidationError(str(exc), ["model.ablation"]) from exc
    model = ModelConfig(**model_raw)

    regions = raw.get("regions", {k: list(v) for k, v in DEFAULT_REGIONS.items()})
    if isinstance(regions, dict):
        regions = {str(k): list(v) if isinstance(v, (list, tuple)) else [v] for k, v in regions.items()}

    cfg = ExperimentConfig(
        schedule=_schedule(raw.get("schedule")),
        train=train,
        model=model,
        regions=regions,
        parts=list(raw.get("parts", DEFAULT_PARTS) or []),
        inversion=_inversion(raw.get("inversion")),
        adapters=AdapterSettings(**_strict("adapters", raw.get("adapters"), AdapterSettings)),
        paths=PathSettings(**_strict("paths", raw.get("paths"), PathSettings)),
    )
    return cfg.validate()


def load_config(path):
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    return config_from_dict(raw)
