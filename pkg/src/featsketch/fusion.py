"""Sketch generator: coarse-to-fine fusion of tapped generator features.

Each level takes the two same-resolution features ``(f_{i-1}, f_i)``,
reduces them with 1x1 convs and concatenates them into ``x``. The previous
fused state is upsampled 2x; a single-channel sigmoid map computed from it
gates ``x`` element-wise, and a 3x3 conv merges the gated ``x`` with the
upsampled state. The coarsest level has no previous state and merges ``x``
directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DimensionError
from .generator_tap import FeaturePyramid, validate_schedule

FEATURE_SUBSETS = ("all", "first_half", "drop_last", "drop_middle_ten")


@dataclass(frozen=True)
class AblationFlags:
    use_attention: bool = True
    use_f_prev_in_pair: bool = True
    feature_subset: str = "all"

    def __post_init__(self):
        if self.feature_subset not in FEATURE_SUBSETS:
            raise ConfigError(f"feature_subset must be one of {FEATURE_SUBSETS}, got {self.feature_subset!r}")


def excluded_features(n, subset):
    """0-based indices of features whose contribution is zeroed.

    ``drop_middle_ten`` removes a centred block of ``min(10, n - 4)``
    features, i.e. features 5-14 (1-based) of an 18-entry schedule.
    """
    if subset == "all":
        return frozenset()
    if subset == "first_half":
        return frozenset(range(n // 2, n))
    if subset == "drop_last":
        return frozenset({n - 1})
    if subset == "drop_middle_ten":
        m = max(0, min(10, n - 4))
        start = (n - m) // 2
        return frozenset(range(start, start + m))
    raise ConfigError(f"unknown feature_subset {subset!r}")


def upsample2x(x):
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


class FusionLevel(nn.Module):
    def __init__(self, resolution, in_a, in_b, reduced_channels, fused_channels, prev_fused_channels=0, use_f_prev=True):
        super().__init__()
        self.resolution = resolution
        self.reduced_channels = reduced_channels
        self.fused_channels = fused_channels
        self.prev_fused_channels = prev_fused_channels
        self.reduce_a = nn.Conv2d(in_a, reduced_channels, 1)
        self.reduce_b = nn.Conv2d(in_b, reduced_channels, 1) if use_f_prev else None
        n_x = reduced_channels * (2 if use_f_prev else 1)
        self.attention_head = nn.Conv2d(prev_fused_channels, 1, 1) if prev_fused_channels else None
        self.merge = nn.Conv2d(n_x + prev_fused_channels, fused_channels, 3, padding=1)


def _batched(x):
    return x.unsqueeze(0) if x.ndim == 3 else x


def spatial_attention(fused_prev_up, params):
    """Gating map in ``[0, 1]`` of shape ``(B, 1, r, r)``."""
    fused_prev_up = _batched(fused_prev_up)
    if params.attention_head is None:
        raise ConfigError("the coarsest fusion level has no attention head")
    if tuple(fused_prev_up.shape[-2:]) != (params.resolution, params.resolution):
        raise DimensionError(
            f"upsampled fused features are {tuple(fused_prev_up.shape[-2:])}, level expects {params.resolution}"
        )
    return torch.sigmoid(params.attention_head(fused_prev_up))


def fuse_step(f_i, f_prev, fused_prev, params, flags=AblationFlags(), gate=None, drop_i=False, drop_prev=False):
    """One fusion level.

    ``gate`` overrides the attention map (any tensor broadcastable to ``x``);
    ``drop_i`` / ``drop_prev`` zero the reduced features of excluded inputs.
    """
    squeeze = f_i.ndim == 3
    f_i = _batched(f_i)
    res = params.resolution
    if tuple(f_i.shape[-2:]) != (res, res):
        raise DimensionError(f"f_i is {tuple(f_i.shape[-2:])}, level expects {res}x{res}")
    a = params.reduce_a(f_i)
    if drop_i:
        a = torch.zeros_like(a)
    parts = [a]
    if params.reduce_b is not None:
        if f_prev is None:
            raise DimensionError("this level also consumes f_(i-1)")
        f_prev = _batched(f_prev)
        if tuple(f_prev.shape[-2:]) != (res, res):
            raise DimensionError(f"f_(i-1) is {tuple(f_prev.shape[-2:])}, level expects {res}x{res}")
        b = params.reduce_b(f_prev)
        if drop_prev:
            b = torch.zeros_like(b)
        parts.append(b)
    x = torch.cat(parts, dim=1) if len(parts) > 1 else parts[0]

    if params.prev_fused_channels == 0:
        if fused_prev is not None:
            raise DimensionError("the coarsest fusion level takes no previous fused features")
        out = params.merge(x)
    else:
        if fused_prev is None:
            raise DimensionError("previous fused features are required above the coarsest level")
        fused_prev = _batched(fused_prev)
        if tuple(fused_prev.shape[-2:]) != (res // 2, res // 2):
            raise DimensionError(f"fused_prev is {tuple(fused_prev.shape[-2:])}, expected {res // 2}x{res // 2}")
        up = upsample2x(fused_prev)
        if gate is not None:
            x = x * gate
        elif flags.use_attention:
            x = x * spatial_attention(up, params)
        out = params.merge(torch.cat([x, up], dim=1))
    out = F.leaky_relu(out, 0.2)
    return out[0] if squeeze else out


class SketchGenerator(nn.Module):
    def __init__(self, schedule, flags=AblationFlags(), reduced_cap=32, fused_max=256, fused_min=32):
        super().__init__()
        schedule.validate()
        self.schedule = schedule
        self.flags = flags
        self.excluded = excluded_features(len(schedule), flags.feature_subset)
        self.levels = nn.ModuleList()
        prev = 0
        for k, (j_prev, j_i) in enumerate(schedule.pairs()):
            res, c_prev = schedule.entries[j_prev]
            c_i = schedule.entries[j_i][1]
            reduced = min(max(c_i, c_prev), reduced_cap)
            fused = max(fused_min, fused_max >> k)
            self.levels.append(FusionLevel(res, c_i, c_prev, reduced, fused, prev, flags.use_f_prev_in_pair))
            prev = fused
        self.output_head = nn.Conv2d(prev, 3, 3, padding=1)

    def fuse(self, features, gates=None):
        fused = None
        for k, (level, (j_prev, j_i)) in enumerate(zip(self.levels, self.schedule.pairs())):
            gate = gates.get(k) if gates else None
            fused = fuse_step(
                features[j_i], features[j_prev], fused, level, self.flags, gate=gate,
                drop_i=j_i in self.excluded, drop_prev=j_prev in self.excluded,
            )
        return fused

    def forward(self, features, gates=None):
        """``features``: list of ``(B, C_j, r_j, r_j)``; returns ``(B, 3, R, R)`` in ``[0, 1]``."""
        fused = self.fuse(features, gates)
        return (torch.tanh(self.output_head(fused)) + 1.0) / 2.0


def build_generator(schedule, flags=AblationFlags(), seed=0, reduced_cap=32, fused_max=256, fused_min=32, dtype=torch.float32):
    schedule.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = SketchGenerator(schedule, flags, reduced_cap, fused_max, fused_min)
    return model.to(dtype)


def generate_sketch(pyramid, params, gates=None):
    if not isinstance(pyramid, FeaturePyramid):
        raise ConfigError("generate_sketch expects a FeaturePyramid")
    if pyramid.schedule != params.schedule:
        raise ConfigError("pyramid schedule differs from the schedule the sketch generator was built for")
    report = validate_schedule(pyramid, params.schedule)
    if report:
        raise ConfigError(f"pyramid does not conform to its schedule: {report}")
    if pyramid.batched:
        return params(pyramid.features, gates)
    return params([f.unsqueeze(0) for f in pyramid.features], gates)[0]
