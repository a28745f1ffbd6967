"""Two-stage training of the sketch generator against a bank of region discriminators."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import torch

from .adapters import StubEmbedNet, StubFeatureNet
from .errors import ConfigError, IntegrityError, TrainingAborted, ValidationError
from .fusion import AblationFlags, build_generator
from .generator_tap import GeneratorHandle, InverterConfig, invert_image
from .losses import (
    LossWeights,
    apply_transform,
    build_discriminator_bank,
    clip_loss,
    discriminator_value,
    generator_adversarial,
    perceptual_loss,
    recon_loss,
    sample_transform,
    total_objective,
)
from .parsing import (
    DEFAULT_PARTS,
    DEFAULT_REGIONS,
    MaskSet,
    StubParser,
    discriminator_masks,
    domain_masks_fgbg,
    parse_face,
    stack_masks,
)

log = logging.getLogger(__name__)

STAGE1_WEIGHTS = LossWeights(200.0, 1.2, 120.0, 1.0)
STAGE2_WEIGHTS = LossWeights(0.0, 1.2, 120.0, 1.0)


@dataclass
class TrainConfig:
    total_iters: int = 7200
    stage1_iters: int = 1600
    lr: float = 0.00014
    weights_stage1: LossWeights = STAGE1_WEIGHTS
    weights_stage2: LossWeights = STAGE2_WEIGHTS
    batch_size: int = 2
    aug_p: float = 0.3
    seed: int = 0
    checkpoint_every: int = 500
    betas: tuple = (0.0, 0.99)

    def __post_init__(self):
        if isinstance(self.weights_stage1, dict):
            self.weights_stage1 = LossWeights(**self.weights_stage1)
        if isinstance(self.weights_stage2, dict):
            self.weights_stage2 = LossWeights(**self.weights_stage2)
        self.betas = tuple(float(b) for b in self.betas)

    def validate(self):
        if self.total_iters < 1:
            raise ValidationError("total_iters must be >= 1", ["total_iters"])
        if not 0 <= self.stage1_iters <= self.total_iters:
            raise ValidationError(
                f"stage1_iters ({self.stage1_iters}) must lie in [0, total_iters ({self.total_iters})]",
                ["stage1_iters", "total_iters"],
            )
        if not (math.isfinite(self.lr) and self.lr > 0):
            raise ValidationError(f"lr must be > 0, got {self.lr}", ["lr"])
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1", ["batch_size"])
        if not 0.0 <= self.aug_p <= 1.0:
            raise ValidationError(f"aug_p must be in [0, 1], got {self.aug_p}", ["aug_p"])
        if self.checkpoint_every < 1:
            raise ValidationError("checkpoint_every must be >= 1", ["checkpoint_every"])
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValidationError(f"betas must be two values in [0, 1), got {self.betas}", ["betas"])
        return self

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def toy_train_config(**overrides):
    """Desk-scale profile: 300 iterations with the same stage fraction as the full run."""
    base = dict(total_iters=300, stage1_iters=67, batch_size=4, checkpoint_every=100)
    base.update(overrides)
    return TrainConfig(**base)


@dataclass(frozen=True)
class ModelConfig:
    reduced_cap: int = 32
    fused_max: int = 256
    fused_min: int = 32
    disc_channels: int = 64
    ablation: AblationFlags = AblationFlags()

    def to_dict(self):
        d = asdict(self)
        d["ablation"] = asdict(self.ablation)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if isinstance(d.get("ablation"), dict):
            d["ablation"] = AblationFlags(**d["ablation"])
        return cls(**d)


def toy_model_config():
    return ModelConfig(reduced_cap=16, fused_max=64, fused_min=16, disc_channels=8)


def stage_weights(iteration, cfg):
    if not 0 <= iteration < cfg.total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.total_iters})")
    return cfg.weights_stage1 if iteration < cfg.stage1_iters else cfg.weights_stage2


def stage_of(iteration, cfg):
    return 1 if iteration < cfg.stage1_iters else 2


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"FSKCKPT1"
_HEADER = struct.Struct(">8s32sQ")


@dataclass
class Checkpoint:
    iteration: int
    generator_params: dict
    discriminator_params: dict
    optimizer_state: dict
    config_hash: str
    rng_state: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)


def _canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(train_cfg, model_cfg, regions, parts, schedule=None):
    """Hash of everything a resumed run must share; the checkpoint cadence is excluded."""
    payload = {
        "schedule": schedule.to_dict() if schedule is not None else None,
        "train": {k: v for k, v in train_cfg.to_dict().items() if k != "checkpoint_every"},
        "model": model_cfg.to_dict(),
        "regions": {k: list(v) for k, v in regions.items()} if isinstance(regions, dict) else regions,
        "parts": list(parts or ()),
    }
    return hashlib.sha256(_canonical(payload).encode()).hexdigest()


def checkpoint_save(ckpt, path):
    buf = io.BytesIO()
    torch.save(asdict(ckpt), buf)
    payload = buf.getvalue()
    digest = hashlib.sha256(payload).digest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(_HEADER.pack(_MAGIC, digest, len(payload)) + payload)
    tmp.replace(path)
    return path


def checkpoint_load(path):
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise IntegrityError(f"{path}: file too short for a checkpoint header")
    magic, digest, length = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise IntegrityError(f"{path}: not a featsketch checkpoint")
    payload = data[_HEADER.size :]
    if len(payload) != length:
        raise IntegrityError(f"{path}: payload is {len(payload)} bytes, header says {length} (truncated?)")
    if hashlib.sha256(payload).digest() != digest:
        raise IntegrityError(f"{path}: checksum mismatch")
    return Checkpoint(**torch.load(io.BytesIO(payload), weights_only=True))


def _update_digest(h, obj, prefix=""):
    if isinstance(obj, torch.Tensor):
        h.update(prefix.encode())
        h.update(str(obj.dtype).encode())
        h.update(obj.detach().cpu().contiguous().numpy().tobytes())
    elif isinstance(obj, dict):
        for k in sorted(obj, key=str):
            _update_digest(h, obj[k], f"{prefix}/{k}")
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            _update_digest(h, v, f"{prefix}[{i}]")
    else:
        h.update(f"{prefix}={obj!r}".encode())


def checkpoint_digest(ckpt):
    """Content hash over parameters, optimizer and random-stream state."""
    h = hashlib.sha256()
    _update_digest(h, {
        "iteration": ckpt.iteration,
        "g": ckpt.generator_params,
        "d": ckpt.discriminator_params,
        "opt": ckpt.optimizer_state,
        "rng": ckpt.rng_state,
    })
    return h.hexdigest()


# ---------------------------------------------------------------------------
# data


@dataclass
class TrainData:
    """In-memory pairs: photos and sketches ``(N, 3, R, R)``, latents ``(N, L, D)``."""

    photos: torch.Tensor
    sketches: torch.Tensor
    latents: Optional[torch.Tensor] = None

    def __len__(self):
        return self.photos.shape[0]


@dataclass
class Adapters:
    parser: object = field(default_factory=StubParser)
    featnet: object = field(default_factory=StubFeatureNet)
    embednet: object = field(default_factory=StubEmbedNet)


def prepare_latents(data, generator, inverter=None):
    """Fill in missing latents by inverting each photo."""
    if data.latents is not None:
        return data
    inverter = inverter or InverterConfig()
    latents = [invert_image(p, generator, inverter).vectors for p in data.photos]
    return TrainData(data.photos, data.sketches, torch.stack(latents))


# ---------------------------------------------------------------------------
# loop


class Trainer:
    def __init__(self, cfg, data, generator, adapters=None, model=None, regions=None, parts=DEFAULT_PARTS, dtype=torch.float32):
        self.cfg = cfg.validate()
        if len(data) == 0:
            raise ConfigError("training dataset is empty")
        if data.latents is None:
            raise ConfigError("every training pair needs a latent; run prepare_latents first")
        self.generator = generator
        self.adapters = adapters or Adapters()
        self.model_cfg = model or ModelConfig()
        self.regions = DEFAULT_REGIONS if regions is None else regions
        self.parts = tuple(parts or ())
        self.dtype = dtype
        schedule = generator.schedule
        m = self.model_cfg
        self.sketch_gen = build_generator(schedule, m.ablation, cfg.seed, m.reduced_cap, m.fused_max, m.fused_min, dtype)
        region_names = list(FGBG_NAMES) if self.regions == "fgbg" else list(self.regions)
        self.bank = build_discriminator_bank(region_names, m.disc_channels, cfg.seed + 1, dtype)
        self.g_opt = torch.optim.Adam(self.sketch_gen.parameters(), lr=cfg.lr, betas=cfg.betas)
        self.d_opt = torch.optim.Adam(self.bank.parameters(), lr=cfg.lr, betas=cfg.betas)
        self.batch_rng = torch.Generator().manual_seed(cfg.seed)
        self.aug_rng = torch.Generator().manual_seed(cfg.seed + 2)
        self.iteration = 0
        self.history = []
        self.config_hash = config_hash(cfg, self.model_cfg, self.regions, self.parts, schedule)
        self._cache(data)

    def _cache(self, data):
        """Features of the frozen generator are computed once per pair and replayed."""
        with torch.no_grad():
            _, feats = self.generator.synthesize_batch(data.latents.to(self.generator.dtype))
        self.features = [f.to(self.dtype) for f in feats]
        self.photos = data.photos.to(self.dtype)
        self.sketches = data.sketches.to(self.dtype)
        self.labels = [parse_face(p, self.adapters.parser) for p in data.photos]
        if self.regions == "fgbg":
            mask_sets = [domain_masks_fgbg(lab) for lab in self.labels]
        else:
            mask_sets = [discriminator_masks(lab, self.regions) for lab in self.labels]
        self.masks = stack_masks(mask_sets)

    def _sample_indices(self):
        n, b = len(self.photos), self.cfg.batch_size
        if b <= n:
            return torch.randperm(n, generator=self.batch_rng)[:b]
        return torch.randint(n, (b,), generator=self.batch_rng)

    def discriminator_step(self, photo, gt, pred, masks):
        self.d_opt.zero_grad(set_to_none=True)
        value = discriminator_value(photo, gt, pred.detach(), masks, self.bank)
        (-value).backward()
        self.d_opt.step()
        return value.detach()

    def generator_step(self, photo_a, pred_a, masks_a, gt, pred, labels, weights, adv_d):
        self.g_opt.zero_grad(set_to_none=True)
        recon = recon_loss(gt, pred)
        perc = perceptual_loss(gt, pred, labels if self.parts else None, self.adapters.featnet, self.parts)
        clip = clip_loss(gt, pred, self.adapters.embednet)
        self.bank.requires_grad_(False)
        try:
            if weights.lambda_adv > 0:
                adv_g = generator_adversarial(photo_a, pred_a, masks_a, self.bank)
            else:
                with torch.no_grad():
                    adv_g = generator_adversarial(photo_a, pred_a, masks_a, self.bank)
            breakdown = total_objective(recon, perc, clip, adv_g, adv_d, weights)
            breakdown.total_g.backward()
        finally:
            self.bank.requires_grad_(True)
        self.g_opt.step()
        return breakdown

    def step(self):
        it = self.iteration
        weights = stage_weights(it, self.cfg)
        idx = self._sample_indices()
        feats = [f[idx] for f in self.features]
        photo, gt = self.photos[idx], self.sketches[idx]
        labels = [self.labels[i] for i in idx.tolist()]
        masks = MaskSet({n: self.masks[n][idx] for n in self.masks.region_names}, self.masks.region_names)

        pred = self.sketch_gen(feats)
        record = sample_transform(self.aug_rng, self.cfg.aug_p, tuple(photo.shape[-2:]))
        if record.is_identity:
            photo_a, gt_a, pred_a, masks_a = photo, gt, pred, masks
        else:
            photo_a, gt_a, pred_a = (apply_transform(x, record) for x in (photo, gt, pred))
            masks_a = MaskSet(
                {n: apply_transform(masks[n][:, None], record, mode="nearest")[:, 0] for n in masks.region_names},
                masks.region_names,
            )

        adv_d = self.discriminator_step(photo_a, gt_a, pred_a, masks_a)
        breakdown = self.generator_step(photo_a, pred_a, masks_a, gt, pred, labels, weights, adv_d)
        rec = {"iteration": it, "stage": stage_of(it, self.cfg), **breakdown.as_record()}
        rec["total"] = rec.pop("total_g")
        self.history.append(rec)
        self.iteration += 1
        return rec

    def checkpoint(self):
        return Checkpoint(
            iteration=self.iteration,
            generator_params={k: v.clone() for k, v in self.sketch_gen.state_dict().items()},
            discriminator_params={k: v.clone() for k, v in self.bank.state_dict().items()},
            optimizer_state={"g": self.g_opt.state_dict(), "d": self.d_opt.state_dict()},
            config_hash=self.config_hash,
            rng_state={"batch": self.batch_rng.get_state(), "aug": self.aug_rng.get_state()},
            config={
                "train": self.cfg.to_dict(),
                "model": self.model_cfg.to_dict(),
                "schedule": self.generator.schedule.to_dict(),
            },
        )

    def restore(self, ckpt, allow_config_change=False):
        if ckpt.config_hash != self.config_hash and not allow_config_change:
            raise ConfigError("checkpoint was written under a different configuration; refusing to resume")
        self.sketch_gen.load_state_dict(ckpt.generator_params)
        self.bank.load_state_dict(ckpt.discriminator_params)
        self.g_opt.load_state_dict(ckpt.optimizer_state["g"])
        self.d_opt.load_state_dict(ckpt.optimizer_state["d"])
        self.batch_rng.set_state(ckpt.rng_state["batch"])
        self.aug_rng.set_state(ckpt.rng_state["aug"])
        self.iteration = ckpt.iteration

    def run(self, stop_at=None, out_dir=None, log_path=None):
        """Iterate until ``stop_at`` (default ``total_iters``); returns checkpoint paths written."""
        stop_at = self.cfg.total_iters if stop_at is None else min(stop_at, self.cfg.total_iters)
        out_dir = Path(out_dir) if out_dir is not None else None
        written = []
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
        if log_path is not None:
            Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_file = open(log_path, "a", encoding="utf-8") if log_path is not None else None
        try:
            while self.iteration < stop_at:
                try:
                    rec = self.step()
                except Exception as exc:
                    last = written[-1] if written else None
                    raise TrainingAborted(f"training aborted at iteration {self.iteration}: {exc}", last) from exc
                if log_file is not None:
                    log_file.write(json.dumps(rec) + "\n")
                if out_dir is not None and (self.iteration % self.cfg.checkpoint_every == 0 or self.iteration == stop_at):
                    written.append(checkpoint_save(self.checkpoint(), out_dir / f"ckpt_{self.iteration:06d}.ckpt"))
                if self.iteration % 50 == 0:
                    log.info("iter %d stage %d total %.4f", rec["iteration"], rec["stage"], rec["total"])
        finally:
            if log_file is not None:
                log_file.close()
        return written


FGBG_NAMES = ("background", "foreground", "full")


@dataclass
class TrainResult:
    trainer: Trainer
    checkpoints: list
    log_path: Optional[Path]

    @property
    def final(self):
        return self.trainer.checkpoint()


def train(cfg, data, generator, adapters=None, model=None, regions=None, parts=DEFAULT_PARTS,
          out_dir=None, resume=None, stop_at=None, allow_config_change=False, inverter=None):
    """Build a :class:`Trainer`, optionally resume from a checkpoint file, and run it."""
    if not isinstance(generator, GeneratorHandle):
        raise ConfigError("generator must be a GeneratorHandle")
    if not isinstance(data, TrainData):
        from .data import load_train_data

        data = load_train_data(data)
    data = prepare_latents(data, generator, inverter)
    trainer = Trainer(cfg, data, generator, adapters, model, regions, parts)
    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else checkpoint_load(resume)
        trainer.restore(ckpt, allow_config_change)
    log_path = Path(out_dir) / "train_log.jsonl" if out_dir is not None else None
    written = trainer.run(stop_at=stop_at, out_dir=out_dir, log_path=log_path)
    return TrainResult(trainer, written, log_path)


def load_sketch_generator(path, schedule, dtype=torch.float32):
    """Rebuild the trained sketch generator from a checkpoint file."""
    ckpt = checkpoint_load(path)
    model = ModelConfig.from_dict(ckpt.config["model"])
    net = build_generator(schedule, model.ablation, 0, model.reduced_cap, model.fused_max, model.fused_min, dtype)
    net.load_state_dict(ckpt.generator_params)
    return net.eval()
