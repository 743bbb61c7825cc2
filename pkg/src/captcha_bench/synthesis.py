"""Synthetic training images: random-resize a CAPTCHA crop and paste it
onto a webpage screenshot, deriving the label from the paste rectangle.

The paste is a direct pixel copy (no blending), one CAPTCHA per image.
Negative samples are untouched webpage images written with empty label
files. Everything is deterministic given the configured seed: each output
record draws from its own sub-seeded generator, so generation order and
worker count cannot change the result.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .core import ClassId, ImageMeta, ImageSource, NormBox, PixelBox, to_norm
from .dataset_io import BUCKETS, DatasetManifest, ManifestRecord, write_labels
from .errors import ConfigError, DataError, SkipRecordError

log = logging.getLogger(__name__)

IMAGE_EXTS = (".png", ".jpg", ".jpeg")


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for composite generation.

    scale_range is the pasted crop's width as a fraction of the page
    width; margin keeps the crop away from the page edge.
    """

    scale_range: tuple[float, float] = (0.15, 0.6)
    per_class_target: int = 0
    negative_count: int = 0
    rng_seed: int = 0
    margin: int = 0

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ConfigError(f"scale_range must satisfy 0 < min <= max <= 1, got {self.scale_range}")
        if self.per_class_target < 0 or self.negative_count < 0:
            raise ConfigError("generation targets must be non-negative")
        if self.margin < 0:
            raise ConfigError("margin must be non-negative")


@dataclass(frozen=True)
class CompositeResult:
    """One pasted composite: pixels, paste rectangle, derived label."""

    image: np.ndarray
    paste_box: PixelBox
    annotation: NormBox
    scaled_captcha: np.ndarray


def composite(
    webpage: np.ndarray,
    captcha: np.ndarray,
    cls: ClassId,
    cfg: SynthConfig,
    rng: np.random.Generator,
) -> CompositeResult:
    """Paste a randomly scaled CAPTCHA crop at a random page position.

    The crop keeps its aspect ratio; the scale factor is drawn uniformly
    from cfg.scale_range and clamped down so the crop fits inside the
    page. Raises SkipRecordError when even the minimum scale cannot fit.
    """
    ph, pw = webpage.shape[:2]
    ch, cw = captcha.shape[:2]
    if pw < 64 or ph < 64:
        raise DataError(f"webpage image {pw}x{ph} below the 64x64 minimum")
    avail_w = pw - 2 * cfg.margin
    avail_h = ph - 2 * cfg.margin
    if avail_w < 1 or avail_h < 1:
        raise SkipRecordError(f"margin {cfg.margin} leaves no paste area on {pw}x{ph} page")

    lo, hi = cfg.scale_range
    u = rng.uniform(lo, hi)
    u_fit = min(avail_w / pw, (avail_h * cw) / (ch * pw))
    u_use = min(u, u_fit)
    if u_use < lo - 1e-12:
        raise SkipRecordError(
            f"{cw}x{ch} captcha cannot fit a {pw}x{ph} page at minimum scale {lo}"
        )
    new_w = math.floor(u_use * pw)
    new_h = round(new_w * ch / cw)
    if new_w < 1 or new_h < 1:
        raise SkipRecordError(f"scaled captcha collapses to {new_w}x{new_h} px")
    new_h = min(new_h, avail_h)

    scaled = np.asarray(
        Image.fromarray(captcha).resize((new_w, new_h), Image.Resampling.BILINEAR)
    )
    x = cfg.margin + int(rng.integers(0, avail_w - new_w + 1))
    y = cfg.margin + int(rng.integers(0, avail_h - new_h + 1))
    out = webpage.copy()
    out[y : y + new_h, x : x + new_w] = scaled

    rect = PixelBox(x, y, x + new_w, y + new_h)
    meta = ImageMeta("composite", pw, ph, ImageSource.SYNTHETIC_COMPOSITE)
    return CompositeResult(
        image=out,
        paste_box=rect,
        annotation=to_norm(rect, meta),
        scaled_captcha=scaled,
    )


def record_rng(seed: int, cls_code: int, index: int, attempt: int) -> np.random.Generator:
    """Generator for one output record, independent of generation order."""
    return np.random.default_rng(
        np.random.SeedSequence(entropy=(seed & 0xFFFFFFFFFFFFFFFF, cls_code, index, attempt))
    )


def _list_images(directory: Path) -> list[Path]:
    return sorted(
        p for p in directory.iterdir() if p.suffix.lower() in IMAGE_EXTS and p.is_file()
    )


def _load_rgb(path: Path, cache: dict[Path, np.ndarray]) -> np.ndarray:
    if path not in cache:
        with Image.open(path) as im:
            cache[path] = np.asarray(im.convert("RGB"))
    return cache[path]


def build_dataset(
    webpage_dir: str | Path,
    captcha_dirs: dict[ClassId, str | Path],
    out_dir: str | Path,
    cfg: SynthConfig,
) -> DatasetManifest:
    """Generate a balanced synthetic dataset under out_dir.

    Produces cfg.per_class_target composites per class plus
    cfg.negative_count plain webpage images with empty labels, cycling
    source files with replacement as needed. Writes images/, labels/ and
    manifest.json; returns the saved manifest.
    """
    webpage_dir = Path(webpage_dir)
    pages = _list_images(webpage_dir)
    if not pages:
        raise ConfigError(f"no webpage images in {webpage_dir}")
    captchas: dict[ClassId, list[Path]] = {}
    for cls in ClassId:
        if cls not in captcha_dirs:
            raise ConfigError(f"missing captcha directory for class {cls.label!r}")
        captchas[cls] = _list_images(Path(captcha_dirs[cls]))
        if not captchas[cls]:
            raise ConfigError(f"no captcha images in {captcha_dirs[cls]}")

    out_root = Path(out_dir)
    (out_root / "images").mkdir(parents=True, exist_ok=True)
    (out_root / "labels").mkdir(parents=True, exist_ok=True)

    cache: dict[Path, np.ndarray] = {}
    records: list[ManifestRecord] = []
    histogram = {b: 0 for b in BUCKETS}

    for cls in ClassId:
        made = 0
        attempt = 0
        while made < cfg.per_class_target:
            if attempt - made > len(pages):
                raise ConfigError(
                    f"no webpage can host captcha {captchas[cls][made % len(captchas[cls])].name} "
                    f"at minimum scale {cfg.scale_range[0]}"
                )
            page_path = pages[attempt % len(pages)]
            cap_path = captchas[cls][made % len(captchas[cls])]
            rng = record_rng(cfg.rng_seed, int(cls), made, attempt)
            try:
                result = composite(
                    _load_rgb(page_path, cache), _load_rgb(cap_path, cache), cls, cfg, rng
                )
            except SkipRecordError as exc:
                log.warning("skipping %s on %s: %s", cap_path.name, page_path.name, exc)
                attempt += 1
                continue
            name = f"{cls.label}_{made:06d}"
            Image.fromarray(result.image).save(out_root / "images" / f"{name}.png", format="PNG")
            write_labels(out_root / "labels" / f"{name}.txt", [(cls, result.annotation)])
            h, w = result.image.shape[:2]
            records.append(
                ManifestRecord(
                    image=f"images/{name}.png",
                    label=f"labels/{name}.txt",
                    width=w,
                    height=h,
                    source=ImageSource.SYNTHETIC_COMPOSITE.value,
                    captcha_class=cls.label,
                    webpage_id=page_path.stem,
                    captcha_id=cap_path.stem,
                )
            )
            histogram[cls.label] += 1
            made += 1
            attempt += 1

    for k in range(cfg.negative_count):
        page_path = pages[k % len(pages)]
        img = _load_rgb(page_path, cache)
        name = f"negative_{k:06d}"
        Image.fromarray(img).save(out_root / "images" / f"{name}.png", format="PNG")
        write_labels(out_root / "labels" / f"{name}.txt", [])
        h, w = img.shape[:2]
        records.append(
            ManifestRecord(
                image=f"images/{name}.png",
                label=f"labels/{name}.txt",
                width=w,
                height=h,
                source=ImageSource.REAL_WEBPAGE.value,
                captcha_class=None,
                webpage_id=page_path.stem,
            )
        )
        histogram["negatives"] += 1

    manifest = DatasetManifest(
        records=records,
        histogram=histogram,
        seed=cfg.rng_seed,
        config={"synth": dataclasses.asdict(cfg)},
        root=out_root,
    )
    manifest.save(out_root / "manifest.json")
    return manifest
