"""Face-part label maps, part crops and discriminator masks.

Label maps are integer ``(H, W)`` tensors over :data:`PALETTE`. A parser is
any callable mapping a ``(3, H, W)`` image to such a map; :class:`StubParser`
draws a fixed synthetic face so tests do not need a segmentation model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ConfigError, ParsingError

PALETTE = {0: "background", 1: "skin", 2: "left-eye", 3: "right-eye", 4: "nose", 5: "lips", 6: "hair", 7: "other"}
LABELS = {name: idx for idx, name in PALETTE.items()}

# named groups usable wherever a part or region name is expected
PART_GROUPS = {"eyes": ("left-eye", "right-eye")}

DEFAULT_PARTS = ("eyes", "nose", "lips")
DEFAULT_REGIONS = {
    "full": ("*",),
    "hair": ("hair",),
    "eyes": ("left-eye", "right-eye"),
    "nose+lips": ("nose", "lips"),
    "skin+background": ("skin", "background"),
}

_PNG_COLORS = [(0, 0, 0), (224, 172, 105), (0, 0, 255), (0, 255, 0), (255, 255, 0), (255, 0, 0), (120, 60, 20), (128, 128, 128)]


@dataclass
class PartLabelMap:
    labels: torch.Tensor
    palette: dict = field(default_factory=lambda: dict(PALETTE))

    def __post_init__(self):
        self.labels = torch.as_tensor(self.labels, dtype=torch.long)
        if self.labels.ndim != 2:
            raise ValueError(f"label map must be 2-D, got shape {tuple(self.labels.shape)}")
        unknown = set(torch.unique(self.labels).tolist()) - set(self.palette)
        if unknown:
            raise ValueError(f"labels outside the palette: {sorted(unknown)}")

    @property
    def resolution(self):
        return self.labels.shape[-1]

    def index_of(self, name):
        for idx, n in self.palette.items():
            if n == name:
                return idx
        raise ConfigError(f"unknown part label {name!r}")

    def save(self, path):
        """Indexed PNG plus a ``.json`` palette sidecar."""
        path = Path(path)
        img = Image.fromarray(self.labels.numpy().astype(np.uint8), mode="P")
        img.putpalette([c for rgb in _PNG_COLORS for c in rgb])
        img.save(path)
        path.with_suffix(".json").write_text(json.dumps({str(k): v for k, v in self.palette.items()}, indent=1))

    @classmethod
    def load(cls, path):
        path = Path(path)
        labels = np.array(Image.open(path))
        sidecar = path.with_suffix(".json")
        palette = {int(k): v for k, v in json.loads(sidecar.read_text()).items()} if sidecar.exists() else dict(PALETTE)
        return cls(torch.from_numpy(labels.astype(np.int64)), palette)


@dataclass
class MaskSet:
    masks: dict
    region_names: list

    def __getitem__(self, name):
        return self.masks[name]

    def __iter__(self):
        return iter(self.region_names)


class StubParser:
    """Deterministic synthetic face layout, defined in unit coordinates ``(u, v)`` in ``[0, 1)``.

    Pixel centre ``(row + 0.5) / H``. Regions, painted in order:
      skin   ellipse centred (0.5, 0.55), semi-axes 0.30 (x) / 0.38 (y)
      hair   v < 0.30 and outside the skin ellipse, u within [0.15, 0.85]
      eyes   discs radius 0.06 at (0.38, 0.45) [left] and (0.62, 0.45) [right]
      nose   triangle apex (0.5, 0.48), base v = 0.62 from u = 0.45 to 0.55
      lips   band v in [0.68, 0.74], u in [0.40, 0.60]
    ``layout='background'`` labels everything background.
    """

    def __init__(self, layout="face"):
        if layout not in ("face", "background"):
            raise ConfigError(f"unknown stub layout {layout!r}")
        self.layout = layout

    def __call__(self, image):
        h, w = image.shape[-2:]
        labels = torch.zeros(h, w, dtype=torch.long)
        if self.layout == "background":
            return labels
        v = (torch.arange(h, dtype=torch.float64)[:, None] + 0.5) / h
        u = (torch.arange(w, dtype=torch.float64)[None, :] + 0.5) / w
        skin = ((u - 0.5) / 0.30) ** 2 + ((v - 0.55) / 0.38) ** 2 <= 1.0
        labels[skin] = LABELS["skin"]
        hair = (v < 0.30) & ~skin & (u >= 0.15) & (u <= 0.85)
        labels[hair] = LABELS["hair"]
        labels[(u - 0.38) ** 2 + (v - 0.45) ** 2 <= 0.06**2] = LABELS["left-eye"]
        labels[(u - 0.62) ** 2 + (v - 0.45) ** 2 <= 0.06**2] = LABELS["right-eye"]
        t = (v - 0.48) / (0.62 - 0.48)
        nose = (t >= 0) & (t <= 1) & ((u - 0.5).abs() <= 0.05 * t)
        labels[nose] = LABELS["nose"]
        labels[(v >= 0.68) & (v <= 0.74) & (u >= 0.40) & (u <= 0.60)] = LABELS["lips"]
        return labels


class UnreachableParser:
    """Placeholder for a parser whose weights or endpoint could not be reached."""

    def __init__(self, location, cause):
        self.location = location
        self.cause = cause

    def __call__(self, image):
        raise ParsingError(f"face parser at {self.location} is unreachable: {self.cause}")


def load_parser(spec):
    """``stub``, ``stub:background`` or ``module:factory``."""
    if spec in (None, "stub"):
        return StubParser()
    if spec == "stub:background":
        return StubParser("background")
    from .adapters import import_object

    try:
        return import_object(spec)()
    except Exception as exc:
        return UnreachableParser(spec, exc)


def parse_face(image, parser):
    try:
        labels = parser(image)
    except ParsingError:
        raise
    except Exception as exc:
        raise ParsingError(f"face parser failed: {exc}") from exc
    if isinstance(labels, PartLabelMap):
        return labels
    try:
        return PartLabelMap(labels)
    except ValueError as exc:
        raise ParsingError(f"face parser returned an invalid label map: {exc}") from exc


def _label_ids(labels, names):
    ids = []
    for name in names:
        for sub in PART_GROUPS.get(name, (name,)):
            ids.append(labels.index_of(sub))
    return ids


def part_mask(labels, part):
    ids = _label_ids(labels, (part,))
    return torch.isin(labels.labels, torch.tensor(ids))


def default_pad(resolution):
    """8 px at 1024, scaled with resolution, at least 1 px."""
    return max(1, round(8 * resolution / 1024))


def part_box(labels, part, pad):
    """Half-open ``(row0, row1, col0, col1)`` box around ``part``, or ``None`` if absent."""
    mask = part_mask(labels, part)
    if not mask.any():
        return None
    rows = torch.nonzero(mask.any(dim=1)).flatten()
    cols = torch.nonzero(mask.any(dim=0)).flatten()
    h, w = mask.shape
    return (
        max(0, rows[0].item() - pad),
        min(h, rows[-1].item() + pad + 1),
        max(0, cols[0].item() - pad),
        min(w, cols[-1].item() + pad + 1),
    )


def part_crop(image, labels, part, pad=None):
    """Crop ``image[..., H, W]`` to the padded box of ``part``; ``None`` when the part is absent."""
    if pad is None:
        pad = default_pad(labels.resolution)
    box = part_box(labels, part, pad)
    if box is None:
        return None
    r0, r1, c0, c1 = box
    return image[..., r0:r1, c0:c1]


def discriminator_masks(labels, regions=None):
    """One binary float mask per region; a region listing ``'*'`` is all-ones."""
    regions = DEFAULT_REGIONS if regions is None else regions
    masks = {}
    for name, members in regions.items():
        if "*" in members:
            masks[name] = torch.ones(labels.labels.shape)
            continue
        ids = _label_ids(labels, members)
        masks[name] = torch.isin(labels.labels, torch.tensor(ids)).float()
    return MaskSet(masks, list(regions))


def domain_masks_fgbg(labels):
    """Background / foreground / full masks for domains without part parsers."""
    bg = (labels.labels == labels.index_of("background")).float()
    return MaskSet({"background": bg, "foreground": 1.0 - bg, "full": torch.ones_like(bg)}, ["background", "foreground", "full"])


FGBG_REGIONS = ("background", "foreground", "full")


def stack_masks(mask_sets):
    """Per-sample MaskSets to one MaskSet of ``(B, H, W)`` masks."""
    names = mask_sets[0].region_names
    return MaskSet({n: torch.stack([m[n] for m in mask_sets]) for n in names}, list(names))
