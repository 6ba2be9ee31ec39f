"""Per-pixel cluster-assignment label maps rendered as lossless images.

Labels come from the same nearest-center argmin that hard VLAD uses, so a
rendered map shows exactly which residual block each pixel contributed to.
A k=8 vocabulary pairs with the default eight-color palette; color i always
means cluster i, so hues are comparable across images and runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .distances import nearest_center_labels
from .errors import ConfigError, ValidationError
from .feature_store import FeatureMap
from .vocabulary import Vocabulary

# Fixed, maximally-distinct 8-color palette (RGB). Index = cluster id.
DEFAULT_PALETTE: tuple[tuple[int, int, int], ...] = (
    (230, 25, 75),  # red
    (60, 180, 75),  # green
    (255, 225, 25),  # yellow
    (0, 130, 200),  # blue
    (245, 130, 48),  # orange
    (145, 30, 180),  # purple
    (70, 240, 240),  # cyan
    (240, 50, 230),  # magenta
)


@dataclass(frozen=True)
class AssignmentMap:
    """Hard cluster index per pixel for one image."""

    image_id: str
    labels: np.ndarray  # (H, W) int32
    k: int

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.labels, dtype=np.int32))
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValidationError(f"labels must be 2-D non-empty, got {arr.shape}")
        if self.k < 1:
            raise ValidationError(f"k must be >= 1, got {self.k}")
        if arr.min() < 0 or arr.max() >= self.k:
            raise ValidationError(
                f"labels must lie in [0, {self.k}); found "
                f"[{arr.min()}, {arr.max()}]"
            )
        arr.flags.writeable = False
        object.__setattr__(self, "labels", arr)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


def assign_map(fmap: FeatureMap, vocab: Vocabulary) -> AssignmentMap:
    """Nearest-center label per pixel, ties to the lowest center index."""
    if fmap.dim != vocab.dim:
        raise ConfigError(
            f"{fmap.image_id}: feature dim {fmap.dim} != vocabulary dim {vocab.dim}"
        )
    labels = nearest_center_labels(fmap.pixels, vocab.centers)
    return AssignmentMap(
        image_id=fmap.image_id,
        labels=labels.reshape(fmap.height, fmap.width),
        k=vocab.k,
    )


def _render(amap: AssignmentMap, palette, upscale: int) -> np.ndarray:
    if upscale < 1:
        raise ConfigError(f"upscale must be >= 1, got {upscale}")
    pal = np.asarray(palette, dtype=np.uint8)
    if pal.ndim != 2 or pal.shape[1] != 3:
        raise ConfigError("palette must be a sequence of RGB triples")
    if pal.shape[0] < amap.k:
        raise ConfigError(
            f"palette has {pal.shape[0]} colors, vocabulary needs {amap.k}"
        )
    rgb = pal[amap.labels]
    if upscale > 1:
        rgb = np.repeat(np.repeat(rgb, upscale, axis=0), upscale, axis=1)
    return rgb


def export_label_image(
    amap: AssignmentMap,
    destination: str | Path,
    palette: Sequence[tuple[int, int, int]] = DEFAULT_PALETTE,
    upscale: int = 1,
) -> None:
    """Write the label map as a PNG, one palette color per cluster index.

    Nearest-neighbor upscaling by an integer factor; output bytes depend
    only on the inputs.
    """
    rgb = _render(amap, palette, upscale)
    Image.fromarray(rgb, mode="RGB").save(str(destination), format="PNG")


def export_montage(
    amaps: Sequence[AssignmentMap],
    destination: str | Path,
    palette: Sequence[tuple[int, int, int]] = DEFAULT_PALETTE,
    upscale: int = 1,
    gutter: int = 2,
) -> None:
    """Side-by-side strip of several label maps (database/query pairs).

    Maps must share a height; gutter columns are white.
    """
    if not amaps:
        raise ConfigError("montage needs at least one assignment map")
    if gutter < 0:
        raise ConfigError(f"gutter must be >= 0, got {gutter}")
    tiles = [_render(a, palette, upscale) for a in amaps]
    heights = {t.shape[0] for t in tiles}
    if len(heights) != 1:
        raise ConfigError(f"montage maps must share a height, got {sorted(heights)}")
    height = heights.pop()
    parts = []
    spacer = np.full((height, gutter, 3), 255, dtype=np.uint8)
    for i, tile in enumerate(tiles):
        if i:
            parts.append(spacer)
        parts.append(tile)
    Image.fromarray(np.concatenate(parts, axis=1), mode="RGB").save(
        str(destination), format="PNG"
    )


__all__ = [
    "DEFAULT_PALETTE",
    "AssignmentMap",
    "assign_map",
    "export_label_image",
    "export_montage",
]
