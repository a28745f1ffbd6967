"""Paired photo/sketch datasets and 8-bit PNG image IO."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import DataError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def load_image(path):
    """Decode to a ``(3, H, W)`` float32 tensor in ``[0, 1]``; grayscale is replicated."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return torch.from_numpy(arr.copy()).permute(2, 0, 1).float() / 255.0


def to_uint8(image):
    return (image.detach().clamp(0, 1) * 255.0).round().to(torch.uint8).permute(1, 2, 0).cpu().numpy()


def save_image(image, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path)
    return path


def image_size(path):
    with Image.open(path) as img:
        return img.size  # (W, H)


@dataclass
class PairedDataset:
    pairs: list  # (photo_path, sketch_path, latent_path or None)
    style_tag: str
    resolution: int
    orphans: list = field(default_factory=list)
    errors: list = field(default_factory=list)

    def __len__(self):
        return len(self.pairs)


def _images(folder):
    if not folder.is_dir():
        return {}
    return {p.stem: p for p in sorted(folder.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def dataset_ingest(root, expected_resolution, style_tag=None, strict=True):
    """Match ``photo/`` and ``sketch/`` files by stem; latents from ``latent/<stem>.npy`` when present.

    Every file ends up paired, in ``orphans`` or in ``errors``. With
    ``strict`` any error raises :class:`DataError` listing all of them.
    """
    root = Path(root)
    photos, sketches = _images(root / "photo"), _images(root / "sketch")
    latent_dir = root / "latent"
    orphans, errors, pairs = [], [], []
    for stem in sorted(set(photos) | set(sketches)):
        if stem not in sketches:
            orphans.append(photos[stem])
            continue
        if stem not in photos:
            orphans.append(sketches[stem])
            continue
        bad = False
        for p in (photos[stem], sketches[stem]):
            w, h = image_size(p)
            if (w, h) != (expected_resolution, expected_resolution):
                errors.append(f"{p}: resolution {w}x{h}, expected {expected_resolution}x{expected_resolution}")
                bad = True
        if bad:
            continue
        latent = latent_dir / f"{stem}.npy"
        pairs.append((photos[stem], sketches[stem], latent if latent.is_file() else None))
    ds = PairedDataset(pairs, style_tag or root.name, expected_resolution, orphans, errors)
    if strict and errors:
        raise DataError("dataset has invalid files:\n  " + "\n  ".join(errors), errors)
    if not pairs:
        raise DataError(f"no photo/sketch pairs found under {root}")
    return ds


def load_train_data(dataset):
    from .generator_tap import LatentCode
    from .trainer import TrainData

    photos = torch.stack([load_image(p) for p, _, _ in dataset.pairs])
    sketches = torch.stack([load_image(s) for _, s, _ in dataset.pairs])
    latents = None
    if all(lat is not None for _, _, lat in dataset.pairs):
        latents = torch.stack([LatentCode.load(lat).vectors for _, _, lat in dataset.pairs])
    return TrainData(photos, sketches, latents)


def edge_sketch(photo):
    """Synthetic line drawing: dark strokes where the luminance gradient is strong.

    Used to fabricate desk-scale training targets from toy photos.
    """
    photo = photo.unsqueeze(0) if photo.ndim == 3 else photo
    lum = (0.299 * photo[:, 0] + 0.587 * photo[:, 1] + 0.114 * photo[:, 2]).unsqueeze(1)
    kx = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]], dtype=photo.dtype).view(1, 1, 3, 3)
    gx = F.conv2d(F.pad(lum, (1, 1, 1, 1), mode="replicate"), kx)
    gy = F.conv2d(F.pad(lum, (1, 1, 1, 1), mode="replicate"), kx.transpose(-1, -2))
    mag = torch.sqrt(gx**2 + gy**2)
    scale = mag.flatten(1).quantile(0.9, dim=1).clamp_min(1e-6).view(-1, 1, 1, 1)
    strokes = (2.0 * mag / scale - 1.0).clamp(0, 1)
    return (1.0 - strokes).repeat(1, 3, 1, 1)


def make_toy_pairs(generator, n, seed=0):
    """``n`` photo/sketch/latent triples from the toy generator, sketches by :func:`edge_sketch`."""
    from .trainer import TrainData

    g = torch.Generator().manual_seed(seed)
    latents = generator.sample_latents(n, g)
    with torch.no_grad():
        photos = generator.render(latents)
    return TrainData(photos, edge_sketch(photos), latents)
