"""Inference built on a trained sketch generator: extraction, latent editing, pair synthesis."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .data import save_image
from .errors import DimensionError
from .fusion import generate_sketch
from .generator_tap import LatentCode, hijack_features, invert_image


@dataclass
class EditDirection:
    """Latent direction; ``vector`` is ``(style_dim,)`` (broadcast to every edited row) or ``(n_layers, style_dim)``."""

    vector: torch.Tensor
    name: str = "direction"
    layer_range: Optional[Sequence[int]] = None

    def __post_init__(self):
        self.vector = torch.as_tensor(self.vector)
        if self.vector.ndim not in (1, 2):
            raise DimensionError(f"direction must be 1-D or 2-D, got shape {tuple(self.vector.shape)}")
        if not torch.isfinite(self.vector).all():
            raise ValueError("direction contains non-finite entries")
        if self.layer_range is not None:
            self.layer_range = [int(r) for r in self.layer_range]

    @classmethod
    def load(cls, path, name=None, layer_range=None):
        path = Path(path)
        return cls(torch.from_numpy(np.load(path, allow_pickle=False)), name or path.stem, layer_range)


def apply_direction(latent, direction, alpha):
    """``latent + alpha * direction`` on the rows in ``direction.layer_range``; other rows are copied as-is."""
    w = latent.vectors
    n_layers, style_dim = w.shape
    d = direction.vector.to(w.dtype)
    if d.ndim == 1:
        if d.shape[0] != style_dim:
            raise DimensionError(f"direction length {d.shape[0]} does not match style_dim {style_dim}")
        d = d.expand(n_layers, style_dim)
    elif tuple(d.shape) != (n_layers, style_dim):
        raise DimensionError(f"direction shape {tuple(d.shape)} does not match latent {tuple(w.shape)}")
    rows = list(range(n_layers)) if direction.layer_range is None else direction.layer_range
    if any(not 0 <= r < n_layers for r in rows):
        raise DimensionError(f"layer_range {rows} outside [0, {n_layers})")
    out = w.detach().clone()
    out[rows] = w[rows] + alpha * d[rows]
    return LatentCode(out)


def sketch_from_latent(latent, generator, sketch_params):
    """Photo and sketch rendered from one latent through one shared feature pyramid."""
    with torch.no_grad():
        photo, pyramid = hijack_features(latent, generator)
        sketch = generate_sketch(pyramid, sketch_params)
    return photo, sketch


def extract_sketch(image, generator, sketch_params, inv):
    """Invert ``image``, tap the generator features and render the sketch. Returns ``(sketch, latent)``."""
    latent = invert_image(image, generator, inv)
    _, sketch = sketch_from_latent(latent, generator, sketch_params)
    return sketch, latent


def semantic_edit(latent, direction, alpha, generator, sketch_params):
    _, sketch = sketch_from_latent(apply_direction(latent, direction, alpha), generator, sketch_params)
    return sketch


@dataclass
class PairedSample:
    latent: LatentCode
    photo: torch.Tensor
    sketch: torch.Tensor
    style_tag: str


def synthesize_pairs(n, seed, generator, sketch_params, style_tag):
    """``n`` photo/sketch pairs from seeded latents, one latent and pyramid per pair."""
    if n == 0:
        return []
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        latents = generator.sample_latents(n, g)
    samples = []
    for w in latents:
        latent = LatentCode(w.clone())
        photo, sketch = sketch_from_latent(latent, generator, sketch_params)
        samples.append(PairedSample(latent, photo, sketch, style_tag))
    return samples


def write_pairs(samples, out_dir, seed=None):
    """Write ``<out>/<style_tag>/{photo,sketch}/NNNNN.png``, ``latent/NNNNN.npy`` and ``manifest.json``."""
    out_dir = Path(out_dir)
    by_tag = {}
    for s in samples:
        by_tag.setdefault(s.style_tag, []).append(s)
    manifests = {}
    for tag, group in by_tag.items():
        root = out_dir / tag
        for sub in ("photo", "sketch", "latent"):
            (root / sub).mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(group):
            stem = f"{i:05d}"
            save_image(s.photo, root / "photo" / f"{stem}.png")
            save_image(s.sketch, root / "sketch" / f"{stem}.png")
            s.latent.save(root / "latent" / f"{stem}.npy")
        manifest = {"style_tag": tag, "count": len(group), "seed": seed, "stems": [f"{i:05d}" for i in range(len(group))]}
        (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
        manifests[tag] = manifest
    return manifests
