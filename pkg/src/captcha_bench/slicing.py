"""Tiling oversized images into fixed-size overlapping slices.

Along each axis the slice intervals follow a recurrence: the first slice
is (0, s); each next one starts where the previous ended minus the overlap
step floor(s*i); and when that would run past the axis length L the final
slice is clamped to (L - s, L). An axis shorter than s yields the single
interval (0, L). Tiling both axes gives a grid; whether the grid engages
at all depends on the activation threshold (multiplier times slice size).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

from .core import Detection, ImageMeta
from .errors import ConfigError
from .metrics import iou

Interval = tuple[int, int]


@dataclass(frozen=True)
class SliceParams:
    """Slice size s (pixels), overlap fraction i, activation multiplier."""

    slice_size: int = 640
    overlap: float = 0.2
    activation_multiplier: float = 3.0

    def __post_init__(self):
        if self.slice_size < 1:
            raise ConfigError(f"slice_size must be >= 1, got {self.slice_size}")
        if not 0.0 <= self.overlap < 1.0:
            raise ConfigError(f"overlap must lie in [0, 1), got {self.overlap}")
        if self.activation_multiplier < 1.0:
            raise ConfigError(
                f"activation_multiplier must be >= 1, got {self.activation_multiplier}"
            )

    @property
    def overlap_px(self) -> int:
        # fractional overlap floored to whole pixels
        return math.floor(self.slice_size * self.overlap)

    @property
    def activation_threshold(self) -> float:
        return self.activation_multiplier * self.slice_size


def axis_slices(length: int, params: SliceParams) -> list[Interval]:
    """Slice intervals along one axis of the given pixel length.

    Generation stops as soon as an interval ends at the axis length; the
    clamped final interval is therefore emitted at most once. An interval
    that fits exactly is produced by the regular step, not the clamp.
    """
    if length < 1:
        raise ConfigError(f"axis length must be >= 1, got {length}")
    s = params.slice_size
    if length <= s:
        return [(0, length)]
    step = params.overlap_px
    out: list[Interval] = [(0, s)]
    while out[-1][1] < length:
        a = out[-1][1] - step
        if a + s > length:
            out.append((length - s, length))
        else:
            out.append((a, a + s))
    return out


@dataclass(frozen=True)
class SliceGrid:
    """Column and row intervals tiling one image, plus the activation flag.

    When activated is False the grid is the single full-image slice.
    """

    image_id: str
    columns: tuple[Interval, ...]
    rows: tuple[Interval, ...]
    activated: bool

    @property
    def slice_count(self) -> int:
        return len(self.columns) * len(self.rows)

    def windows(self) -> Iterator[tuple[int, int, int, int, int, int]]:
        """Yield (row_idx, col_idx, ax, ay, width, height) per slice."""
        for ri, (ay, by) in enumerate(self.rows):
            for ci, (ax, bx) in enumerate(self.columns):
                yield ri, ci, ax, ay, bx - ax, by - ay


def build_grid(meta: ImageMeta, params: SliceParams) -> SliceGrid:
    """Slice grid for an image; engages only for oversized inputs.

    An image whose longer side reaches multiplier * slice_size is tiled
    along both axes; anything smaller passes through as one full slice.
    """
    if max(meta.width, meta.height) >= params.activation_threshold:
        return SliceGrid(
            image_id=meta.image_id,
            columns=tuple(axis_slices(meta.width, params)),
            rows=tuple(axis_slices(meta.height, params)),
            activated=True,
        )
    return full_grid(meta)


def full_grid(meta: ImageMeta) -> SliceGrid:
    """Single-slice grid covering the whole image."""
    return SliceGrid(
        image_id=meta.image_id,
        columns=((0, meta.width),),
        rows=((0, meta.height),),
        activated=False,
    )


def remap_detection(det: Detection, slice_origin: tuple[float, float]) -> Detection:
    """Translate a slice-local detection into full-image coordinates."""
    ax, ay = slice_origin
    return det.translate(ax, ay)


def merge_detections(
    dets: Sequence[Detection], iou_threshold: float = 0.5
) -> list[Detection]:
    """Per-class non-maximum suppression over full-image detections.

    Walking in confidence order (ties keep input order), a detection is
    kept unless it overlaps an already-kept detection of the same class at
    IoU >= threshold. Idempotent: merging twice equals merging once.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ConfigError(f"merge iou_threshold must lie in (0, 1], got {iou_threshold}")
    order = sorted(range(len(dets)), key=lambda k: -dets[k].confidence)
    kept: list[int] = []
    for di in order:
        d = dets[di]
        if any(
            dets[kj].cls == d.cls and iou(dets[kj].box, d.box) >= iou_threshold
            for kj in kept
        ):
            continue
        kept.append(di)
    kept.sort()
    return [dets[k] for k in kept]


def export_slices(
    image_path: str | Path, grid: SliceGrid, out_dir: str | Path
) -> list[Path]:
    """Debug helper: write every slice as {image_id}_r{row}_c{col}.png."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    with Image.open(image_path) as im:
        im = im.convert("RGB")
        for ri, ci, ax, ay, w, h in grid.windows():
            tile = im.crop((ax, ay, ax + w, ay + h))
            path = out / f"{grid.image_id}_r{ri}_c{ci}.png"
            tile.save(path, format="PNG")
            written.append(path)
    return written
