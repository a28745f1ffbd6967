"""Feature taps on a frozen image generator.

A :class:`GeneratorHandle` wraps any ``nn.Module`` that maps a batch of
extended latents ``(B, n_layers, style_dim)`` to images in ``[0, 1]``.
Intermediate activations are captured with forward hooks on the named tap
submodules, in the order the forward pass visits them.

:class:`ToyGenerator` is a small fixed-weight stand-in with the same
dataflow as a progressive style generator, so every downstream piece can be
exercised without pretrained weights.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, NamedTuple, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DimensionError, ScheduleError


# ---------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class FeatureSchedule:
    """Ordered ``(resolution, channels)`` list of tapped features."""

    entries: tuple
    base_resolution: int = 4
    output_resolution: int = 1024

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple((int(r), int(c)) for r, c in self.entries))

    def __len__(self):
        return len(self.entries)

    @property
    def levels(self):
        """Distinct resolutions, coarse to fine."""
        return sorted({r for r, _ in self.entries})

    @property
    def n_levels(self):
        return len(self.entries) // 2

    def pairs(self):
        """Index pairs ``(i-1, i)`` sharing a resolution, one per level."""
        return [(2 * k, 2 * k + 1) for k in range(len(self.entries) // 2)]

    def validate(self):
        errors = []
        if not self.entries:
            raise ScheduleError("schedule has no entries")
        if self.base_resolution < 1:
            errors.append(f"base_resolution must be positive, got {self.base_resolution}")
        resolutions = [r for r, _ in self.entries]
        channels = [c for _, c in self.entries]
        if any(c < 1 for c in channels):
            errors.append("channel counts must be positive")
        for prev, cur in zip(resolutions, resolutions[1:]):
            if cur < prev:
                errors.append(f"resolutions must be non-decreasing ({prev} followed by {cur})")
                break
        for r in sorted(set(resolutions)):
            ratio = r / self.base_resolution
            if ratio < 1 or not float(ratio).is_integer() or int(ratio) & (int(ratio) - 1):
                errors.append(f"resolution {r} is not a power of two times base {self.base_resolution}")
            count = resolutions.count(r)
            if count != 2:
                errors.append(f"resolution {r} appears {count} times; every level needs exactly 2 entries")
        levels = sorted(set(resolutions))
        if levels and levels[0] != self.base_resolution:
            errors.append(f"first level {levels[0]} differs from base_resolution {self.base_resolution}")
        for lo, hi in zip(levels, levels[1:]):
            if hi != 2 * lo:
                errors.append(f"levels must double: {lo} followed by {hi}")
        if levels and levels[-1] != self.output_resolution:
            errors.append(f"last level {levels[-1]} differs from output_resolution {self.output_resolution}")
        for prev, cur in zip(channels, channels[1:]):
            if cur > prev:
                errors.append(f"channels must be non-increasing ({prev} followed by {cur})")
                break
        if errors:
            raise ScheduleError("; ".join(errors))
        return self

    def to_dict(self):
        return {
            "entries": [list(e) for e in self.entries],
            "base_resolution": self.base_resolution,
            "output_resolution": self.output_resolution,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(tuple(e) for e in d["entries"]), d.get("base_resolution", 4), d.get("output_resolution", 1024))


def default_schedule():
    """18-entry schedule of a 1024px progressive generator (4 to 1024, 512 to 3 channels)."""
    channels = {4: 512, 8: 512, 16: 512, 32: 512, 64: 512, 128: 256, 256: 128, 512: 64}
    entries = []
    for res, ch in channels.items():
        entries += [(res, ch), (res, ch)]
    entries += [(1024, 32), (1024, 3)]
    return FeatureSchedule(tuple(entries), 4, 1024)


def toy_schedule():
    """10-entry desk-scale schedule, resolutions 4 to 64."""
    entries = [(4, 32), (4, 32), (8, 32), (8, 32), (16, 16), (16, 16), (32, 16), (32, 16), (64, 8), (64, 3)]
    return FeatureSchedule(tuple(entries), 4, 64)


# ---------------------------------------------------------------------------
# latents and pyramids


@dataclass
class LatentCode:
    """Extended latent, one style vector per generator layer."""

    vectors: torch.Tensor

    def __post_init__(self):
        if not isinstance(self.vectors, torch.Tensor):
            self.vectors = torch.as_tensor(np.asarray(self.vectors))
        if self.vectors.ndim != 2:
            raise DimensionError(f"latent must be 2-D (n_layers, style_dim), got shape {tuple(self.vectors.shape)}")
        if not torch.isfinite(self.vectors).all():
            raise ValueError("latent contains non-finite entries")

    @property
    def n_layers(self):
        return self.vectors.shape[0]

    @property
    def style_dim(self):
        return self.vectors.shape[1]

    def clone(self):
        return LatentCode(self.vectors.detach().clone())

    def save(self, path):
        np.save(Path(path), self.vectors.detach().cpu().numpy(), allow_pickle=False)

    @classmethod
    def load(cls, path):
        arr = np.load(Path(path), allow_pickle=False)
        return cls(torch.from_numpy(arr))


@dataclass
class FeaturePyramid:
    # features[i]: (C_i, r_i, r_i), or (B, C_i, r_i, r_i) for a batch
    features: list
    schedule: FeatureSchedule

    def __len__(self):
        return len(self.features)

    @property
    def batched(self):
        return bool(self.features) and self.features[0].ndim == 4


class Deviation(NamedTuple):
    index: int
    expected: Optional[tuple]
    found: Optional[tuple]
    reason: str


def validate_schedule(pyramid, schedule):
    """Return a list of :class:`Deviation`; empty when the pyramid conforms."""
    report = []
    feats = pyramid.features if isinstance(pyramid, FeaturePyramid) else list(pyramid)
    n = max(len(feats), len(schedule))
    for i in range(n):
        expected = (schedule.entries[i][1], schedule.entries[i][0], schedule.entries[i][0]) if i < len(schedule) else None
        if i >= len(feats):
            report.append(Deviation(i, expected, None, "missing feature (length mismatch)"))
            continue
        found = tuple(feats[i].shape[-3:]) if feats[i].ndim >= 3 else tuple(feats[i].shape)
        if expected is None:
            report.append(Deviation(i, None, found, "unexpected extra feature (length mismatch)"))
        elif feats[i].ndim not in (3, 4) or found != expected:
            report.append(Deviation(i, expected, tuple(feats[i].shape), "shape mismatch"))
    return report


# ---------------------------------------------------------------------------
# handles


class GeneratorHandle:
    """Frozen generator plus the names of the submodules whose outputs are tapped.

    ``module(ws)`` must accept ``(B, n_layers, style_dim)`` and return images
    ``(B, 3, R, R)`` in ``[0, 1]``. The tap submodules are hooked for the
    duration of one forward call.
    """

    def __init__(self, module, schedule, tap_names=None, kind="pretrained-adapter", style_dim=None, mapper=None, z_dim=None):
        schedule.validate()
        if kind not in ("pretrained-adapter", "toy"):
            raise ConfigError(f"unknown generator kind {kind!r}")
        self.module = module.eval().requires_grad_(False)
        self.schedule = schedule
        self.kind = kind
        self.tap_names = list(tap_names if tap_names is not None else module.tap_names)
        if len(self.tap_names) != len(schedule):
            raise ScheduleError(f"{len(self.tap_names)} tap points for a {len(schedule)}-entry schedule")
        self.style_dim = style_dim if style_dim is not None else module.style_dim
        self.n_layers = len(schedule)
        self.mapper = mapper
        self.z_dim = z_dim if z_dim is not None else self.style_dim
        named = dict(module.named_modules())
        missing = [n for n in self.tap_names if n not in named]
        if missing:
            raise ConfigError(f"tap modules not found in generator: {missing}")
        self._taps = [named[n] for n in self.tap_names]
        self._lock = threading.Lock()

    @property
    def dtype(self):
        for t in list(self.module.parameters()) + list(self.module.buffers()):
            return t.dtype
        return torch.float32

    def check_latents(self, ws):
        if ws.ndim != 3 or ws.shape[1:] != (self.n_layers, self.style_dim):
            raise DimensionError(
                f"latent shape {tuple(ws.shape[1:]) if ws.ndim == 3 else tuple(ws.shape)} "
                f"does not match generator ({self.n_layers}, {self.style_dim})"
            )

    def render(self, ws):
        """Images only, no taps; differentiable in ``ws``."""
        self.check_latents(ws)
        return self.module(ws)

    def synthesize_batch(self, ws):
        """``(B, L, D)`` latents to ``(images, [features...])`` with taps in forward order."""
        self.check_latents(ws)
        captured = []

        def hook(_mod, _inp, out):
            captured.append(out)

        with self._lock:
            handles = [m.register_forward_hook(hook) for m in self._taps]
            try:
                images = self.module(ws)
            finally:
                for h in handles:
                    h.remove()
        if len(captured) != len(self.schedule):
            raise ScheduleError(f"generator produced {len(captured)} tapped activations, expected {len(self.schedule)}")
        return images, captured

    def synthesize(self, latent):
        return hijack_features(latent, self)

    def sample_latents(self, n, generator=None):
        """Draw ``n`` extended latents. Uses the mapper when the handle has one."""
        if self.mapper is not None:
            z = torch.randn(n, self.z_dim, generator=generator, dtype=self.dtype)
            w = self.mapper(z)
            return w.unsqueeze(1).repeat(1, self.n_layers, 1)
        return torch.randn(n, self.n_layers, self.style_dim, generator=generator, dtype=self.dtype)

    def mean_latent(self, n_samples=4096):
        if self.mapper is None:
            return LatentCode(torch.zeros(self.n_layers, self.style_dim, dtype=self.dtype))
        g = torch.Generator().manual_seed(0)
        with torch.no_grad():
            w = self.sample_latents(n_samples, g).mean(0)
        return LatentCode(w)


def hijack_features(latent, generator):
    """Run one latent through the generator and return ``(image, FeaturePyramid)``."""
    vec = latent.vectors if isinstance(latent, LatentCode) else latent
    if vec.ndim != 2 or tuple(vec.shape) != (generator.n_layers, generator.style_dim):
        raise DimensionError(
            f"latent shape {tuple(vec.shape)} does not match generator ({generator.n_layers}, {generator.style_dim})"
        )
    with torch.no_grad():
        images, feats = generator.synthesize_batch(vec.to(generator.dtype).unsqueeze(0))
    return images[0], FeaturePyramid([f[0] for f in feats], generator.schedule)


# ---------------------------------------------------------------------------
# toy generator


class ToyStyleConv(nn.Module):
    """3x3 conv whose input channels are scaled by an affine map of one latent row."""

    def __init__(self, in_ch, out_ch, style_dim, generator, upsample=False, to_image=False):
        super().__init__()
        self.upsample = upsample
        self.to_image = to_image
        self.register_buffer("weight", torch.randn(out_ch, in_ch, 3, 3, generator=generator) / math.sqrt(in_ch * 9))
        self.register_buffer("bias", 0.1 * torch.randn(out_ch, generator=generator))
        self.register_buffer("affine", torch.randn(style_dim, in_ch, generator=generator) / math.sqrt(style_dim))

    def forward(self, x, w):
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        style = 1.0 + 0.25 * (w @ self.affine)
        x = x * style[:, :, None, None]
        x = F.conv2d(x, self.weight, self.bias, padding=1)
        if self.to_image:
            return torch.tanh(x)
        return F.leaky_relu(x, 0.2) * math.sqrt(2.0)


class ToyGenerator(nn.Module):
    def __init__(self, schedule, style_dim=32, seed=0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.style_dim = style_dim
        entries = schedule.entries
        c0 = entries[0][1]
        self.register_buffer("const", torch.randn(1, c0, schedule.base_resolution, schedule.base_resolution, generator=g))
        self.convs = nn.ModuleList()
        in_ch = c0
        for i, (res, ch) in enumerate(entries):
            up = i > 0 and res > entries[i - 1][0]
            self.convs.append(ToyStyleConv(in_ch, ch, style_dim, g, upsample=up, to_image=i == len(entries) - 1))
            in_ch = ch
        self.tap_names = [f"convs.{i}" for i in range(len(entries))]

    def forward(self, ws):
        x = self.const.expand(ws.shape[0], -1, -1, -1)
        for i, conv in enumerate(self.convs):
            x = conv(x, ws[:, i])
        return (x + 1.0) / 2.0


def build_toy_generator(schedule, seed=0, style_dim=32, dtype=torch.float32):
    schedule.validate()
    module = ToyGenerator(schedule, style_dim=style_dim, seed=seed).to(dtype)
    return GeneratorHandle(module, schedule, kind="toy")


# ---------------------------------------------------------------------------
# inversion


@dataclass
class InverterConfig:
    encoder: Optional[Callable] = None
    refine_steps: int = 200
    refine_lr: float = 0.01
    pixel_w: float = 1.0
    perceptual_w: float = 0.8
    featnet: Optional[Callable] = None

    def __post_init__(self):
        if self.refine_steps < 0:
            raise ConfigError("refine_steps must be >= 0")
        if not self.refine_lr > 0:
            raise ConfigError("refine_lr must be > 0")


def _as_latent(x):
    return x if isinstance(x, LatentCode) else LatentCode(torch.as_tensor(x))


def inversion_objective(ws, image, generator, cfg, featnet):
    """pixel_w * L1(image, G(ws)) + perceptual_w * sum over taps of mean-L1 activation distance."""
    regen = generator.render(ws)
    target = image.unsqueeze(0).to(regen.dtype)
    loss = cfg.pixel_w * (regen - target).abs().mean()
    if cfg.perceptual_w:
        for a, b in zip(featnet(regen), featnet(target)):
            loss = loss + cfg.perceptual_w * (a - b).abs().mean()
    return loss


def invert_image(image, generator, cfg, trace=None):
    """Project an aligned image into the generator's extended latent space.

    Initialization comes from ``cfg.encoder`` (or the handle's mean latent
    when refinement is enabled and no encoder is set). All latent rows are
    refined with Adam; the lowest-objective code seen is returned. When
    ``trace`` is a list, the best-so-far objective after each evaluation is
    appended to it.
    """
    res = generator.schedule.output_resolution
    if image.ndim != 3 or tuple(image.shape) != (3, res, res):
        raise DimensionError(f"image shape {tuple(image.shape)} does not match generator output (3, {res}, {res})")
    if cfg.encoder is None and cfg.refine_steps == 0:
        raise ConfigError("inversion needs an encoder when refine_steps is 0")

    init = _as_latent(cfg.encoder(image)) if cfg.encoder is not None else generator.mean_latent()
    if cfg.refine_steps == 0:
        return init

    if cfg.featnet is None:
        from .adapters import StubFeatureNet

        featnet = StubFeatureNet()
    else:
        featnet = cfg.featnet

    image = image.detach().to(generator.dtype)
    w = init.vectors.detach().clone().to(generator.dtype).unsqueeze(0).requires_grad_(True)
    opt = torch.optim.Adam([w], lr=cfg.refine_lr)
    best, best_w = math.inf, init.vectors.detach().clone()
    for step in range(cfg.refine_steps + 1):
        opt.zero_grad(set_to_none=True)
        loss = inversion_objective(w, image, generator, cfg, featnet)
        value = loss.item()
        if value < best:
            best, best_w = value, w.detach()[0].clone()
        if trace is not None:
            trace.append(best)
        if step == cfg.refine_steps:
            break
        loss.backward()
        opt.step()
    return LatentCode(best_w)
