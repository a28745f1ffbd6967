"""Training objectives for the sketch generator.

Images are ``(B, 3, H, W)`` tensors in ``[0, 1]`` (single images without
the batch axis are accepted where noted). All distances use mean reduction.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DegeneracyError, DimensionError, NumericError
from .parsing import DEFAULT_PARTS, PartLabelMap, default_pad, part_box

PROB_FLOOR = 1e-6


@dataclass(frozen=True)
class LossWeights:
    lambda_recon: float = 200.0
    lambda_perc: float = 1.2
    lambda_clip: float = 120.0
    lambda_adv: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not math.isfinite(value) or value < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {value}")

    def to_dict(self):
        return asdict(self)


@dataclass
class LossBreakdown:
    recon: object
    perc: object
    clip: object
    adv_g: object
    adv_d: object
    total_g: object

    def as_record(self):
        return {k: float(torch.as_tensor(getattr(self, k)).detach()) for k in ("recon", "perc", "clip", "adv_g", "adv_d", "total_g")}


def _batched(x):
    return x.unsqueeze(0) if x.ndim == 3 else x


def recon_loss(gt, pred):
    if gt.shape != pred.shape:
        raise DimensionError(f"shape mismatch: {tuple(gt.shape)} vs {tuple(pred.shape)}")
    return (gt - pred).abs().mean()


def feature_distance(featnet, a, b):
    """Sum over tapped layers of the mean absolute activation difference."""
    total = 0.0
    for fa, fb in zip(featnet(a), featnet(b)):
        total = total + (fa - fb).abs().mean()
    return total


def perceptual_loss(gt, pred, labels, featnet, parts=DEFAULT_PARTS, pad=None):
    """Full-image feature distance plus the mean over present parts of the cropped distance.

    ``labels`` is one :class:`PartLabelMap` for the whole batch, a sequence
    with one map per sample, or ``None`` (full-image term only). Each sample's
    part term is divided by its own count of present parts and averaged over
    the batch; samples with no present part contribute zero.
    """
    gt, pred = _batched(gt), _batched(pred)
    if gt.shape != pred.shape:
        raise DimensionError(f"shape mismatch: {tuple(gt.shape)} vs {tuple(pred.shape)}")
    loss = feature_distance(featnet, gt, pred)
    if labels is None or not parts:
        return loss
    if isinstance(labels, PartLabelMap):
        labels = [labels] * gt.shape[0]
    if len(labels) != gt.shape[0]:
        raise DimensionError(f"{len(labels)} label maps for a batch of {gt.shape[0]}")
    part_total = 0.0
    for b, lab in enumerate(labels):
        if lab.labels.shape != gt.shape[-2:]:
            raise DimensionError(f"label map {tuple(lab.labels.shape)} vs image {tuple(gt.shape[-2:])}")
        p = default_pad(lab.resolution) if pad is None else pad
        boxes = [box for box in (part_box(lab, part, p) for part in parts) if box is not None]
        if not boxes:
            continue
        term = 0.0
        for r0, r1, c0, c1 in boxes:
            term = term + feature_distance(featnet, gt[b : b + 1, :, r0:r1, c0:c1], pred[b : b + 1, :, r0:r1, c0:c1])
        part_total = part_total + term / len(boxes)
    return loss + part_total / gt.shape[0]


def clip_loss(gt, pred, embednet, eps=1e-12):
    """``1 - cos(embed(gt), embed(pred))`` averaged over the batch, in ``[0, 2]``."""
    gt, pred = _batched(gt), _batched(pred)
    e_gt, e_pred = embednet(gt), embednet(pred)
    n_gt, n_pred = e_gt.norm(dim=-1), e_pred.norm(dim=-1)
    if (n_gt < eps).any() or (n_pred < eps).any():
        raise DegeneracyError("zero-norm embedding; cosine similarity is undefined")
    cos = ((e_gt * e_pred).sum(-1) / (n_gt * n_pred)).clamp(-1.0, 1.0)
    return (1.0 - cos).mean()


# ---------------------------------------------------------------------------
# discriminators


class PatchDiscriminator(nn.Module):
    """Conditional 70x70 patch classifier on ``cat(photo, sketch)``; returns patch probabilities."""

    def __init__(self, in_channels=6, ndf=64):
        super().__init__()
        layers = [nn.Conv2d(in_channels, ndf, 4, 2, 1), nn.LeakyReLU(0.2)]
        ch = ndf
        for mult in (2, 4):
            layers += [nn.Conv2d(ch, ndf * mult, 4, 2, 1), nn.LeakyReLU(0.2)]
            ch = ndf * mult
        layers += [nn.Conv2d(ch, ndf * 8, 4, 1, 1), nn.LeakyReLU(0.2)]
        layers += [nn.Conv2d(ndf * 8, 1, 4, 1, 1)]
        self.net = nn.Sequential(*layers)

    def forward(self, photo, sketch):
        return torch.sigmoid(self.net(torch.cat([photo, sketch], dim=1)))


def build_discriminator_bank(region_names, ndf=64, seed=0, dtype=torch.float32):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        bank = nn.ModuleDict({_module_key(n): PatchDiscriminator(6, ndf) for n in region_names})
    bank.region_names = list(region_names)
    return bank.to(dtype)


def _module_key(name):
    # ModuleDict keys may not contain '.'
    return name.replace(".", "_")


def _bank_items(bank, masks):
    names = list(getattr(bank, "region_names", None) or bank.keys())
    if set(names) != set(masks.region_names):
        raise ConfigError(f"discriminator regions {sorted(names)} differ from mask regions {sorted(masks.region_names)}")
    for name in masks.region_names:
        d = bank[_module_key(name)] if isinstance(bank, nn.ModuleDict) else bank[name]
        yield name, d


def apply_mask(x, mask):
    x = _batched(x)
    m = mask.to(x.dtype)
    m = m[None, None] if m.ndim == 2 else m[:, None]
    return x * m


def _log_prob(p):
    return torch.log(p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR))


def discriminator_value(photo, gt, pred, masks, bank):
    """Sum over regions of ``E[log D(M*I, M*gt)] + E[log(1 - D(M*I, M*pred))]`` (to be maximised)."""
    total = 0.0
    for name, d in _bank_items(bank, masks):
        m = masks[name]
        mp = apply_mask(photo, m)
        real = d(mp, apply_mask(gt, m))
        fake = d(mp, apply_mask(pred, m))
        total = total + _log_prob(real).mean() + _log_prob(1.0 - fake).mean()
    return total


def generator_adversarial(photo, pred, masks, bank):
    """Non-saturating generator term: sum over regions of ``E[-log D(M*I, M*pred)]``."""
    total = 0.0
    for name, d in _bank_items(bank, masks):
        m = masks[name]
        total = total - _log_prob(d(apply_mask(photo, m), apply_mask(pred, m))).mean()
    return total


def adversarial_losses(photo, gt, pred, masks, bank):
    """Return ``(adv_g, adv_d)``."""
    return generator_adversarial(photo, pred, masks, bank), discriminator_value(photo, gt, pred, masks, bank)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentRecord:
    flip: bool = False
    tx: int = 0
    ty: int = 0
    angle: float = 0.0  # degrees
    scale: float = 1.0

    @property
    def is_identity(self):
        return not self.flip and self.tx == 0 and self.ty == 0 and self.angle == 0.0 and self.scale == 1.0


def sample_transform(rng, p, size, max_angle=10.0, scale_range=(0.9, 1.1)):
    """Draw one geometric transform; each primitive is active with probability ``p``.

    The same number of values is consumed from ``rng`` on every call.
    """
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"augmentation probability must be in [0, 1], got {p}")
    h, w = size
    on = torch.rand(4, generator=rng, dtype=torch.float64) < p
    max_tx, max_ty = w // 8, h // 8
    shift = torch.rand(2, generator=rng, dtype=torch.float64)
    tx = int(torch.floor(shift[0] * (2 * max_tx + 1)).item()) - max_tx
    ty = int(torch.floor(shift[1] * (2 * max_ty + 1)).item()) - max_ty
    angle = (torch.rand(1, generator=rng, dtype=torch.float64).item() * 2 - 1) * max_angle
    lo, hi = scale_range
    scale = lo + torch.rand(1, generator=rng, dtype=torch.float64).item() * (hi - lo)
    return AugmentRecord(
        flip=bool(on[0]),
        tx=tx if on[1] else 0,
        ty=ty if on[1] else 0,
        angle=angle if on[2] else 0.0,
        scale=scale if on[3] else 1.0,
    )


def _translate(x, tx, ty):
    pad = max(abs(tx), abs(ty))
    if pad == 0:
        return x
    h, w = x.shape[-2:]
    padded = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    return padded[..., pad - ty : pad - ty + h, pad - tx : pad - tx + w]


def apply_transform(x, record, mode="bilinear"):
    """Apply a recorded transform to ``(B, C, H, W)`` (or ``(C, H, W)``); flip, translate, then rotate/scale."""
    squeeze = x.ndim == 3
    x = _batched(x)
    if record.flip:
        x = torch.flip(x, dims=[-1])
    x = _translate(x, record.tx, record.ty)
    if record.angle != 0.0 or record.scale != 1.0:
        theta = math.radians(record.angle)
        c, s = math.cos(theta) / record.scale, math.sin(theta) / record.scale
        mat = torch.tensor([[c, -s, 0.0], [s, c, 0.0]], dtype=x.dtype).expand(x.shape[0], 2, 3)
        grid = F.affine_grid(mat, list(x.shape), align_corners=False)
        x = F.grid_sample(x, grid, mode=mode, padding_mode="reflection", align_corners=False)
    return x[0] if squeeze else x


def joint_augment(photo, gt, pred, rng, p=0.3):
    """Same random geometric transform on photo, target and prediction.

    Returns ``(photo', gt', pred', record)``; ``record`` replays the transform
    through :func:`apply_transform`.
    """
    record = sample_transform(rng, p, tuple(photo.shape[-2:]))
    if record.is_identity:
        return photo, gt, pred, record
    return apply_transform(photo, record), apply_transform(gt, record), apply_transform(pred, record), record


# ---------------------------------------------------------------------------
# combination


def total_objective(recon, perc, clip, adv_g, adv_d, weights):
    components = {"recon": recon, "perc": perc, "clip": clip, "adv_g": adv_g, "adv_d": adv_d}
    for name, value in components.items():
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise NumericError(f"loss component {name} is not finite ({v})", component=name)
    total = (
        weights.lambda_recon * recon
        + weights.lambda_perc * perc
        + weights.lambda_clip * clip
        + weights.lambda_adv * adv_g
    )
    return LossBreakdown(recon, perc, clip, adv_g, adv_d, total)
