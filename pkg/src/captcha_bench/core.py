"""Shared domain types: detection classes and boxes in pixel / normalized form.

All types here are immutable values and safe to share between workers.
Pixel boxes keep float coordinates end to end; rasterization happens only
when files are written, so repeated coordinate remapping does not
accumulate rounding error.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum, IntEnum

from .errors import BoundsError, DegenerateBoxError, InvalidBoxError

COORD_TOL = 1e-6


class ClassId(IntEnum):
    """The four detection classes.

    Integer codes are frozen: label files, manifests and wire messages all
    rely on them. An image with no CAPTCHA is represented by an empty
    annotation list, never by a class code.
    """

    TEXT = 0
    PUZZLE = 1
    IMAGE = 2
    BUTTON = 3

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_name(cls, name: str) -> "ClassId":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"unknown class name {name!r}") from None


CLASS_NAMES: tuple[str, ...] = tuple(c.label for c in ClassId)


class ImageSource(Enum):
    REAL_WEBPAGE = "real_webpage"
    SYNTHETIC_COMPOSITE = "synthetic_composite"
    CAPTCHA_CROP = "captcha_crop"


@dataclass(frozen=True)
class PixelBox:
    """Axis-aligned box in pixel coordinates, xyxy corners, floats."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.x1 < 0 or self.y1 < 0:
            raise InvalidBoxError(f"negative corner in {self.as_tuple()}")
        if self.x2 <= self.x1 or self.y2 <= self.y1:
            raise DegenerateBoxError(f"empty extent in {self.as_tuple()}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def translate(self, dx: float, dy: float) -> "PixelBox":
        return PixelBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)


@dataclass(frozen=True)
class NormBox:
    """Center/size box as fractions of image width and height."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise DegenerateBoxError(f"zero-size normalized box {self}")
        if self.w > 1 + COORD_TOL or self.h > 1 + COORD_TOL:
            raise InvalidBoxError(f"normalized size above 1 in {self}")
        for c, s in ((self.cx, self.w), (self.cy, self.h)):
            if c - s / 2 < -COORD_TOL or c + s / 2 > 1 + COORD_TOL:
                raise BoundsError(f"normalized box leaves the unit square: {self}")


@dataclass(frozen=True)
class ImageMeta:
    image_id: str
    width: int
    height: int
    source: ImageSource = ImageSource.REAL_WEBPAGE

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise InvalidBoxError(f"image {self.image_id!r} has empty dimensions")


@dataclass(frozen=True)
class Detection:
    """One predicted box on one image (or image slice)."""

    image_id: str
    cls: ClassId
    box: PixelBox
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise InvalidBoxError(f"confidence {self.confidence} outside [0, 1]")

    def translate(self, dx: float, dy: float) -> "Detection":
        return replace(self, box=self.box.translate(dx, dy))


@dataclass(frozen=True)
class GroundTruth:
    """One annotated box on one image."""

    image_id: str
    cls: ClassId
    box: PixelBox


def to_norm(box: PixelBox, meta: ImageMeta) -> NormBox:
    """Convert a pixel box to center/size fractions of the image frame.

    Raises BoundsError if the box sticks out of the image.
    """
    if box.x2 > meta.width + COORD_TOL or box.y2 > meta.height + COORD_TOL:
        raise BoundsError(
            f"box {box.as_tuple()} exceeds {meta.width}x{meta.height} image"
        )
    return NormBox(
        cx=(box.x1 + box.x2) / (2 * meta.width),
        cy=(box.y1 + box.y2) / (2 * meta.height),
        w=box.width / meta.width,
        h=box.height / meta.height,
    )


def to_pixel(box: NormBox, meta: ImageMeta) -> PixelBox:
    """Inverse of to_norm, exact up to float rounding.

    Coordinates that land a hair outside the frame because of the 1e-6
    normalized tolerance are clamped back onto it.
    """
    x1 = (box.cx - box.w / 2) * meta.width
    x2 = (box.cx + box.w / 2) * meta.width
    y1 = (box.cy - box.h / 2) * meta.height
    y2 = (box.cy + box.h / 2) * meta.height
    return PixelBox(
        x1=min(max(x1, 0.0), meta.width),
        y1=min(max(y1, 0.0), meta.height),
        x2=min(max(x2, x1), meta.width),
        y2=min(max(y2, y1), meta.height),
    )
