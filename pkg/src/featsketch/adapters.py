"""Pluggable networks used by the losses: perceptual taps and image embeddings.

Stubs have fixed, seeded weights and follow the dtype of their input, so
they work for float32 training runs and float64 gradient checks alike.
Pretrained adapters load weights from a local path; nothing is downloaded.
"""

from __future__ import annotations

import importlib
import math
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import AdapterError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


class IdentityFeatureNet(nn.Module):
    """One tap: the image itself."""

    def forward(self, x):
        return [x]


class StubFeatureNet(nn.Module):
    """Fixed random conv stack with ``n_taps`` tapped stages (first at full size, then stride 2)."""

    def __init__(self, n_taps=4, width=8, seed=0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        in_ch = 3
        for i in range(n_taps):
            self.register_buffer(f"w{i}", torch.randn(width, in_ch, 3, 3, generator=g) / math.sqrt(in_ch * 9))
            self.register_buffer(f"b{i}", 0.1 * torch.randn(width, generator=g))
            in_ch = width
        self.n_taps = n_taps

    def forward(self, x):
        taps = []
        for i in range(self.n_taps):
            w = getattr(self, f"w{i}").to(x.dtype)
            b = getattr(self, f"b{i}").to(x.dtype)
            x = torch.tanh(F.conv2d(x, w, b, stride=1 if i == 0 else 2, padding=1))
            taps.append(x)
        return taps


class StubEmbedNet(nn.Module):
    """Fixed random conv encoder pooled on a 4x4 grid; returns ``(B, dim)`` vectors."""

    def __init__(self, dim=64, width=8, seed=1):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.register_buffer("w0", torch.randn(width, 3, 3, 3, generator=g) / math.sqrt(27))
        self.register_buffer("b0", 0.1 * torch.randn(width, generator=g))
        self.register_buffer("w1", torch.randn(width, width, 3, 3, generator=g) / math.sqrt(width * 9))
        self.register_buffer("b1", 0.1 * torch.randn(width, generator=g))
        self.register_buffer("proj", torch.randn(width * 16, dim, generator=g) / math.sqrt(width * 16))

    def forward(self, x):
        x = 2.0 * x - 1.0
        h = torch.tanh(F.conv2d(x, self.w0.to(x.dtype), self.b0.to(x.dtype), stride=2, padding=1))
        h = torch.tanh(F.conv2d(h, self.w1.to(x.dtype), self.b1.to(x.dtype), stride=2, padding=1))
        pooled = F.adaptive_avg_pool2d(h, 4).flatten(1)
        return pooled @ self.proj.to(x.dtype)


def _vgg16_feature_layers():
    from torchvision.models.vgg import cfgs, make_layers

    return make_layers(cfgs["D"], batch_norm=False)


class VGG16Features(nn.Module):
    """Taps after relu1_2, relu2_2, relu3_3 and relu4_3 of VGG16.

    ``weights_path`` points at a torchvision ``vgg16`` state dict (or its
    ``features.*`` subset). Inputs are ``[0, 1]`` images.
    """

    TAP_INDICES = (3, 8, 15, 22)

    def __init__(self, weights_path=None):
        super().__init__()
        self.features = _vgg16_feature_layers()[: self.TAP_INDICES[-1] + 1]
        if weights_path is not None:
            path = Path(weights_path)
            if not path.is_file():
                raise AdapterError(f"VGG16 weights not found at {path}")
            state = torch.load(path, map_location="cpu", weights_only=True)
            state = {k[len("features."):]: v for k, v in state.items() if k.startswith("features.")} or state
            state = {k: v for k, v in state.items() if int(k.split(".")[0]) <= self.TAP_INDICES[-1]}
            self.features.load_state_dict(state)
        self.requires_grad_(False).eval()
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))

    def forward(self, x):
        x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        taps = []
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in self.TAP_INDICES:
                taps.append(x)
        return taps


class ClipImageEmbedding(nn.Module):
    """Image tower of a locally stored CLIP checkpoint (transformers format)."""

    def __init__(self, model_path):
        super().__init__()
        try:
            from transformers import CLIPModel

            self.model = CLIPModel.from_pretrained(model_path, local_files_only=True)
        except Exception as exc:
            raise AdapterError(f"cannot load CLIP model from {model_path}: {exc}") from exc
        self.model.requires_grad_(False).eval()
        self.size = self.model.config.vision_config.image_size
        self.register_buffer("mean", torch.tensor(CLIP_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(CLIP_STD).view(1, 3, 1, 1))

    def forward(self, x):
        x = F.interpolate(x, size=(self.size, self.size), mode="bicubic", align_corners=False)
        x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        return self.model.get_image_features(pixel_values=x)


def import_object(spec):
    """Resolve ``'package.module:attr'``."""
    module_name, _, attr = spec.partition(":")
    if not attr:
        raise AdapterError(f"adapter spec {spec!r} must look like 'module:attr'")
    try:
        obj = importlib.import_module(module_name)
        for part in attr.split("."):
            obj = getattr(obj, part)
    except (ImportError, AttributeError) as exc:
        raise AdapterError(f"cannot import adapter {spec!r}: {exc}") from exc
    return obj


def load_adapter(spec, role):
    """Build a perceptual (``role='perceptual'``) or embedding (``role='embedding'``) adapter.

    Accepted specs: ``stub``, ``identity`` (perceptual only), ``vgg16[:path]``,
    ``clip:path`` and ``module:factory`` for anything else.
    """
    if spec in (None, "stub"):
        return StubFeatureNet() if role == "perceptual" else StubEmbedNet()
    if spec == "identity" and role == "perceptual":
        return IdentityFeatureNet()
    kind, _, arg = spec.partition(":")
    if kind == "vgg16":
        return VGG16Features(arg or None)
    if kind == "clip":
        return ClipImageEmbedding(arg)
    factory = import_object(spec)
    try:
        return factory()
    except Exception as exc:
        raise AdapterError(f"adapter factory {spec!r} failed: {exc}") from exc
