"""End-to-end evaluation: slice, detect, remap, merge, match, aggregate.

Images fan out over a bounded worker pool; per-image partial results are
reduced in input order once all workers finish, so metrics are identical
for any worker count. Detector wall time is clocked here, around each
call; the adapter's self-reported inference time is carried through
separately.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from threading import local
from typing import Callable, Sequence

import numpy as np
from PIL import Image

from .core import ClassId, Detection, GroundTruth, ImageMeta, ImageSource, to_pixel
from .dataset_io import DatasetManifest, read_labels
from .detectors import Detector, DetectorError, DetectorRequest
from .errors import ConfigError, DataError
from .metrics import MetricsReport, confusion_matrix, match_detections, pr_curve
from .slicing import SliceParams, build_grid, full_grid, merge_detections, remap_detection

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalRunConfig:
    """Evaluation settings: slicing, merge/match thresholds, parallelism."""

    slicing_enabled: bool = False
    slice_params: SliceParams = field(default_factory=SliceParams)
    merge_iou: float = 0.5
    match_iou: float = 0.5
    confusion_confidence: float = 0.25
    parallelism: int = 1

    def __post_init__(self):
        for name in ("merge_iou", "match_iou", "confusion_confidence"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {v}")
        if self.parallelism < 1:
            raise ConfigError(f"parallelism must be >= 1, got {self.parallelism}")


@dataclass(frozen=True)
class EvalItem:
    """One image to evaluate: metadata, ground truth, pixels on disk."""

    meta: ImageMeta
    gts: tuple[GroundTruth, ...]
    image_path: str = ""


def items_from_manifest(manifest: DatasetManifest, split: str | None = None) -> list[EvalItem]:
    """Evaluation items for every manifest record (optionally one split)."""
    if manifest.root is None:
        raise DataError("manifest has no root directory")
    items: list[EvalItem] = []
    for rec in manifest.records:
        if split is not None and rec.split != split:
            continue
        meta = ImageMeta(rec.image_id, rec.width, rec.height, ImageSource(rec.source))
        gts = tuple(
            GroundTruth(rec.image_id, cls, to_pixel(box, meta))
            for cls, box in read_labels(manifest.root / rec.label)
        )
        items.append(EvalItem(meta, gts, str(manifest.root / rec.image)))
    return items


def items_from_dirs(images_dir: str | Path, labels_dir: str | Path) -> list[EvalItem]:
    """Evaluation items from an images/labels directory pair.

    Every image must have a label file of the same stem (possibly empty).
    """
    images_dir, labels_dir = Path(images_dir), Path(labels_dir)
    items: list[EvalItem] = []
    paths = sorted(
        p for p in images_dir.iterdir()
        if p.suffix.lower() in (".png", ".jpg", ".jpeg") and p.is_file()
    )
    seen: set[str] = set()
    for path in paths:
        if path.stem in seen:
            raise DataError(f"duplicate image id {path.stem!r} in {images_dir}")
        seen.add(path.stem)
        label_path = labels_dir / f"{path.stem}.txt"
        if not label_path.exists():
            raise DataError(f"missing label file for {path.name}")
        with Image.open(path) as im:
            width, height = im.size
        meta = ImageMeta(path.stem, width, height)
        gts = tuple(
            GroundTruth(path.stem, cls, to_pixel(box, meta))
            for cls, box in read_labels(label_path)
        )
        items.append(EvalItem(meta, gts, str(path)))
    return items


@dataclass
class _ImagePartial:
    image_id: str
    failed: bool = False
    n_slices: int = 0
    n_detections: int = 0
    tallies: dict[ClassId, list[int]] = field(default_factory=dict)  # cls -> [tp, fp, gt]
    scored: dict[ClassId, list[tuple[float, bool]]] = field(default_factory=dict)
    confusion: np.ndarray | None = None
    self_ms: float = 0.0
    wall_ms: float = 0.0


def _evaluate_image(item: EvalItem, detector: Detector, cfg: EvalRunConfig) -> _ImagePartial:
    part = _ImagePartial(image_id=item.meta.image_id)
    grid = (
        build_grid(item.meta, cfg.slice_params)
        if cfg.slicing_enabled
        else full_grid(item.meta)
    )
    part.n_slices = grid.slice_count

    raw: list[Detection] = []
    try:
        for _, _, ax, ay, w, h in grid.windows():
            request = DetectorRequest(
                image_id=item.meta.image_id,
                image_path=item.image_path,
                slice_origin=(ax, ay) if grid.activated else None,
                slice_size=(w, h) if grid.activated else None,
                image_size=(item.meta.width, item.meta.height),
            )
            t0 = time.perf_counter()
            response = detector.detect(request)
            part.wall_ms += (time.perf_counter() - t0) * 1000.0
            part.self_ms += response.inference_ms
            raw.extend(remap_detection(d, (ax, ay)) for d in response.detections)
    except DetectorError as exc:
        log.warning("image %s failed: %s", item.meta.image_id, exc)
        part.failed = True
        return part

    merged = merge_detections(raw, cfg.merge_iou)
    part.n_detections = len(merged)
    result = match_detections(merged, list(item.gts), cfg.match_iou)

    matched = result.matched_det_indices()
    for cls in ClassId:
        n_gt = sum(1 for g in item.gts if g.cls == cls)
        counts = result.per_class.get(cls)
        tp = counts.tp if counts else 0
        fp = counts.fp if counts else 0
        if tp or fp or n_gt:
            part.tallies[cls] = [tp, fp, n_gt]
    for di, det in enumerate(merged):
        part.scored.setdefault(det.cls, []).append((det.confidence, di in matched))
    part.confusion = confusion_matrix(
        merged, list(item.gts), cfg.match_iou, cfg.confusion_confidence
    )
    return part


def evaluate_pipeline(
    items: Sequence[EvalItem],
    detector_factory: Callable[[], Detector],
    cfg: EvalRunConfig = EvalRunConfig(),
    config_echo: dict | None = None,
    collect_curves: bool = False,
) -> MetricsReport:
    """Evaluate a dataset and compile the metrics report.

    detector_factory is invoked once per worker thread; pass
    ``lambda: shared`` for detectors that are safe to share. Images whose
    detector calls keep failing are excluded from the metrics and counted
    under counts.failed_images.
    """
    if not items:
        raise DataError("nothing to evaluate: empty dataset")

    created: list[Detector] = []
    slot = local()

    def worker(indexed: tuple[int, EvalItem]) -> _ImagePartial:
        _, item = indexed
        if not hasattr(slot, "det"):
            slot.det = detector_factory()
            created.append(slot.det)
        return _evaluate_image(item, slot.det, cfg)

    try:
        if cfg.parallelism == 1:
            partials = [worker((i, item)) for i, item in enumerate(items)]
        else:
            with ThreadPoolExecutor(max_workers=cfg.parallelism) as pool:
                partials = list(pool.map(worker, enumerate(items)))
    finally:
        seen_ids = set()
        for det in created:
            if id(det) not in seen_ids:
                seen_ids.add(id(det))
                det.close()

    tallies: dict[ClassId, tuple[int, int, int]] = {}
    scored: dict[ClassId, list[tuple[float, bool]]] = {}
    confusion = np.zeros((5, 5), dtype=np.int64)
    failed: list[str] = []
    n_annotations = 0
    n_detections = 0
    n_calls = 0
    self_ms = 0.0
    wall_ms = 0.0
    for item, part in zip(items, partials):
        if part.failed:
            failed.append(part.image_id)
            continue
        n_annotations += len(item.gts)
        n_detections += part.n_detections
        n_calls += part.n_slices
        self_ms += part.self_ms
        wall_ms += part.wall_ms
        for cls, (tp, fp, gt) in ((c, tuple(v)) for c, v in part.tallies.items()):
            old = tallies.get(cls, (0, 0, 0))
            tallies[cls] = (old[0] + tp, old[1] + fp, old[2] + gt)
        for cls, entries in part.scored.items():
            scored.setdefault(cls, []).extend(entries)
        confusion += part.confusion

    n_ok = len(items) - len(failed)
    counts = {
        "images": n_ok,
        "annotations": n_annotations,
        "detections": n_detections,
        "detector_calls": n_calls,
        "failed_images": len(failed),
        "failed_image_ids": failed,
    }
    timing = {
        "detector_total": self_ms,
        "detector_mean_per_image": self_ms / n_ok if n_ok else None,
        "wall_total": wall_ms,
        "wall_mean_per_image": wall_ms / n_ok if n_ok else None,
    }
    echo = dict(config_echo or {})
    echo.setdefault("merge_iou", cfg.merge_iou)
    echo.setdefault("match_iou", cfg.match_iou)
    echo.setdefault("confusion_confidence", cfg.confusion_confidence)
    echo.setdefault("slicing_enabled", cfg.slicing_enabled)
    if cfg.slicing_enabled:
        echo.setdefault(
            "slice_params",
            {
                "slice_size": cfg.slice_params.slice_size,
                "overlap": cfg.slice_params.overlap,
                "activation_multiplier": cfg.slice_params.activation_multiplier,
            },
        )
    report = MetricsReport.from_tallies(tallies, scored, confusion, timing, counts, echo)
    if collect_curves:
        report.pr_curves = {
            cls.label: pr_curve(entries, tallies[cls][2])
            for cls, entries in sorted(scored.items())
            if cls in tallies and tallies[cls][2] > 0
        }
    return report
