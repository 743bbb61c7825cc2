"""Detection metrics: IoU matching, precision/recall/F1, AP and mAP@50,
confusion matrices, and the weighted model ranking.

All functions are pure. Per-image results (counts, scored detections,
confusion cells) combine associatively, so a dataset evaluation may run
image-parallel and reduce at the end.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import CLASS_NAMES, ClassId, Detection, GroundTruth, PixelBox
from .errors import ConfigError, DataError

# Confusion matrix axis order; index 4 is the background pseudo-class.
CONFUSION_LABELS: tuple[str, ...] = CLASS_NAMES + ("background",)
BACKGROUND = len(ClassId)


def iou(a: PixelBox, b: PixelBox) -> float:
    """Intersection over union of two boxes; 0 when disjoint."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


@dataclass(frozen=True)
class MatchCounts:
    tp: int
    fp: int
    fn: int
    matched_pairs: tuple[tuple[int, int, float], ...] = ()


@dataclass(frozen=True)
class MatchResult:
    """Outcome of matching one image's detections against its ground truth.

    matched_pairs holds (detection index, ground-truth index, IoU) triples;
    per_class carries the same breakdown keyed by class.
    """

    tp: int
    fp: int
    fn: int
    matched_pairs: tuple[tuple[int, int, float], ...]
    per_class: dict[ClassId, MatchCounts] = field(default_factory=dict)

    def matched_det_indices(self) -> frozenset[int]:
        return frozenset(d for d, _, _ in self.matched_pairs)


def _check_threshold(name: str, value: float) -> None:
    if not 0.0 < value < 1.0:
        raise ConfigError(f"{name} must lie in (0, 1), got {value}")


def _greedy_match(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    iou_threshold: float,
    same_class: bool,
) -> list[tuple[int, int, float]]:
    """Greedy matcher: detections in confidence order each take the free
    ground truth with the highest IoU at or above the threshold.

    Ties in confidence keep input order; ties in IoU take the lower ground
    truth index. Each side is matched at most once.
    """
    order = sorted(range(len(dets)), key=lambda k: -dets[k].confidence)
    free = [True] * len(gts)
    pairs: list[tuple[int, int, float]] = []
    for di in order:
        det = dets[di]
        best_gi = -1
        best_iou = 0.0
        for gi, gt in enumerate(gts):
            if not free[gi]:
                continue
            if same_class and gt.cls != det.cls:
                continue
            v = iou(det.box, gt.box)
            if v >= iou_threshold and v > best_iou:
                best_gi, best_iou = gi, v
        if best_gi >= 0:
            free[best_gi] = False
            pairs.append((di, best_gi, best_iou))
    return pairs


def match_detections(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    iou_threshold: float = 0.5,
) -> MatchResult:
    """Match one image's detections to its ground truth, class-aware.

    Unmatched detections count as FP, unmatched ground truths as FN.
    Inputs must all carry the same image_id.
    """
    _check_threshold("iou_threshold", iou_threshold)
    ids = {d.image_id for d in dets} | {g.image_id for g in gts}
    if len(ids) > 1:
        raise DataError(f"mixed image ids in one match call: {sorted(ids)}")

    pairs = _greedy_match(dets, gts, iou_threshold, same_class=True)
    per_class: dict[ClassId, MatchCounts] = {}
    for cls in ClassId:
        cls_pairs = tuple(p for p in pairs if dets[p[0]].cls == cls)
        n_det = sum(1 for d in dets if d.cls == cls)
        n_gt = sum(1 for g in gts if g.cls == cls)
        counts = MatchCounts(
            tp=len(cls_pairs),
            fp=n_det - len(cls_pairs),
            fn=n_gt - len(cls_pairs),
            matched_pairs=cls_pairs,
        )
        if n_det or n_gt:
            per_class[cls] = counts
    return MatchResult(
        tp=len(pairs),
        fp=len(dets) - len(pairs),
        fn=len(gts) - len(pairs),
        matched_pairs=tuple(pairs),
        per_class=per_class,
    )


def precision(tp: int, fp: int) -> float | None:
    """TP / (TP + FP); None when there are no positive predictions."""
    if tp < 0 or fp < 0:
        raise DataError("negative counts")
    if tp + fp == 0:
        return None
    return tp / (tp + fp)


def recall(tp: int, fn: int) -> float | None:
    """TP / (TP + FN); None when there is no ground truth."""
    if tp < 0 or fn < 0:
        raise DataError("negative counts")
    if tp + fn == 0:
        return None
    return tp / (tp + fn)


def f1(p: float, r: float) -> float | None:
    """Harmonic mean of precision and recall; None when both are zero."""
    if p + r == 0:
        return None
    return 2 * p * r / (p + r)


def average_precision(
    scored: Sequence[tuple[float, bool]], gt_count: int
) -> float:
    """Area under the monotone precision-recall envelope for one class.

    scored holds (confidence, is_true_positive) for every detection of the
    class, in any order. Detections sharing a confidence enter the curve
    together, so the result equals enumerating every distinct confidence
    threshold regardless of tie order. Recall uses gt_count as denominator.
    """
    if gt_count < 1:
        raise DataError("average_precision needs at least one ground truth")
    if not scored:
        return 0.0

    by_conf = sorted(scored, key=lambda s: -s[0])
    recalls: list[float] = []
    precisions: list[float] = []
    tp = fp = 0
    k = 0
    while k < len(by_conf):
        conf = by_conf[k][0]
        while k < len(by_conf) and by_conf[k][0] == conf:
            if by_conf[k][1]:
                tp += 1
            else:
                fp += 1
            k += 1
        recalls.append(tp / gt_count)
        precisions.append(tp / (tp + fp))
    if tp == 0:
        return 0.0

    # precision envelope: best precision at this recall or beyond
    envelope = precisions[:]
    for j in range(len(envelope) - 2, -1, -1):
        envelope[j] = max(envelope[j], envelope[j + 1])

    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recalls, envelope):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return ap


def mean_ap(per_class_ap: Mapping[ClassId, float]) -> float | None:
    """Unweighted mean AP over the classes present in the ground truth."""
    if not per_class_ap:
        return None
    return sum(per_class_ap.values()) / len(per_class_ap)


def confusion_matrix(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    iou_threshold: float = 0.5,
    confidence_threshold: float = 0.25,
) -> np.ndarray:
    """5x5 confusion matrix, rows = predicted class, columns = true class.

    Matching is class-agnostic; a matched pair lands in (predicted, true).
    Unmatched ground truth goes to the background row, unmatched detections
    to the background column. Detections under the confidence threshold
    are ignored.
    """
    _check_threshold("iou_threshold", iou_threshold)
    _check_threshold("confidence_threshold", confidence_threshold)
    kept = [d for d in dets if d.confidence >= confidence_threshold]
    pairs = _greedy_match(kept, gts, iou_threshold, same_class=False)

    m = np.zeros((5, 5), dtype=np.int64)
    matched_d = {p[0] for p in pairs}
    matched_g = {p[1] for p in pairs}
    for di, gi, _ in pairs:
        m[int(kept[di].cls), int(gts[gi].cls)] += 1
    for di, d in enumerate(kept):
        if di not in matched_d:
            m[int(d.cls), BACKGROUND] += 1
    for gi, g in enumerate(gts):
        if gi not in matched_g:
            m[BACKGROUND, int(g.cls)] += 1
    return m


@dataclass(frozen=True)
class PrCurvePoint:
    """One precision-recall point at a distinct confidence threshold."""

    confidence: float
    precision: float
    recall: float


def pr_curve(scored: Sequence[tuple[float, bool]], gt_count: int) -> list[PrCurvePoint]:
    """Raw PR points, one per distinct confidence, threshold descending.

    Recall is non-decreasing along the returned list.
    """
    if gt_count < 1:
        raise DataError("pr_curve needs at least one ground truth")
    by_conf = sorted(scored, key=lambda s: -s[0])
    points: list[PrCurvePoint] = []
    tp = fp = 0
    k = 0
    while k < len(by_conf):
        conf = by_conf[k][0]
        while k < len(by_conf) and by_conf[k][0] == conf:
            if by_conf[k][1]:
                tp += 1
            else:
                fp += 1
            k += 1
        points.append(PrCurvePoint(conf, tp / (tp + fp), tp / gt_count))
    return points


@dataclass
class ClassMetrics:
    """Metric bundle for one class; None marks undefined (0/0) ratios."""

    tp: int
    fp: int
    fn: int
    gt_count: int
    precision: float | None
    recall: float | None
    f1: float | None
    ap: float | None

    def to_dict(self) -> dict:
        return {
            "tp": self.tp, "fp": self.fp, "fn": self.fn, "gt_count": self.gt_count,
            "precision": self.precision, "recall": self.recall,
            "f1": self.f1, "ap": self.ap,
        }


@dataclass
class MetricsReport:
    """Full evaluation result: per-class and pooled metrics, mAP@50,
    confusion matrix, timing stats and dataset counts."""

    per_class: dict[str, ClassMetrics]
    aggregate: dict
    confusion: np.ndarray
    timing_ms: dict
    counts: dict
    config: dict
    # raw curve points per class label; filled on demand, never serialized
    # into the main report document
    pr_curves: dict[str, list["PrCurvePoint"]] | None = None

    @classmethod
    def from_tallies(
        cls,
        class_tallies: Mapping[ClassId, tuple[int, int, int]],
        scored: Mapping[ClassId, Sequence[tuple[float, bool]]],
        confusion: np.ndarray,
        timing_ms: dict,
        counts: dict,
        config: dict,
    ) -> "MetricsReport":
        """Assemble a report from per-class (tp, fp, gt_count) tallies and
        per-class scored detections. Classes absent from the ground truth
        are excluded from mAP."""
        per_class: dict[str, ClassMetrics] = {}
        per_class_ap: dict[ClassId, float] = {}
        tot_tp = tot_fp = tot_fn = 0
        for c in ClassId:
            tp, fp, gt_count = class_tallies.get(c, (0, 0, 0))
            fn = gt_count - tp
            if tp == 0 and fp == 0 and gt_count == 0:
                continue
            ap = None
            if gt_count > 0:
                ap = average_precision(scored.get(c, ()), gt_count)
                per_class_ap[c] = ap
            p = precision(tp, fp)
            r = recall(tp, fn)
            per_class[c.label] = ClassMetrics(
                tp=tp, fp=fp, fn=fn, gt_count=gt_count,
                precision=p, recall=r,
                f1=f1(p, r) if p is not None and r is not None else None,
                ap=ap,
            )
            tot_tp += tp
            tot_fp += fp
            tot_fn += fn
        p = precision(tot_tp, tot_fp)
        r = recall(tot_tp, tot_fn)
        aggregate = {
            "tp": tot_tp, "fp": tot_fp, "fn": tot_fn,
            "precision": p, "recall": r,
            "f1": f1(p, r) if p is not None and r is not None else None,
            "map50": mean_ap(per_class_ap),
        }
        return cls(
            per_class=per_class,
            aggregate=aggregate,
            confusion=confusion,
            timing_ms=timing_ms,
            counts=counts,
            config=config,
        )

    def to_dict(self) -> dict:
        return {
            "per_class": {k: v.to_dict() for k, v in self.per_class.items()},
            "aggregate": self.aggregate,
            "confusion_matrix": [[int(v) for v in row] for row in self.confusion],
            "confusion_labels": list(CONFUSION_LABELS),
            "timing_ms": self.timing_ms,
            "counts": self.counts,
            "config": self.config,
        }


@dataclass(frozen=True)
class ModelScoreRow:
    """One model's headline metrics, all in [0, 1]."""

    model: str
    precision: float
    recall: float
    f1: float
    map: float

    def __post_init__(self):
        for name in ("precision", "recall", "f1", "map"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DataError(f"{self.model}: {name}={v} outside [0, 1]")


@dataclass(frozen=True)
class RankWeights:
    """Weights for the weighted-arithmetic-mean model score; must sum to 1."""

    f1: float = 0.5
    map: float = 0.25
    precision: float = 0.125
    recall: float = 0.125

    def __post_init__(self):
        vals = (self.f1, self.map, self.precision, self.recall)
        if any(v < 0 for v in vals):
            raise ConfigError(f"negative ranking weight in {vals}")
        if abs(sum(vals) - 1.0) > 1e-9:
            raise ConfigError(f"ranking weights sum to {sum(vals)}, expected 1")


@dataclass(frozen=True)
class RankedModel:
    model: str
    score: float
    row: ModelScoreRow


def rank_models(
    rows: Sequence[ModelScoreRow], weights: RankWeights = RankWeights()
) -> list[RankedModel]:
    """Order models by weighted arithmetic mean of their metrics.

    The sort is stable and descending, so equal scores keep input order.
    """
    scored = [
        RankedModel(
            model=r.model,
            score=(
                weights.f1 * r.f1
                + weights.map * r.map
                + weights.precision * r.precision
                + weights.recall * r.recall
            ),
            row=r,
        )
        for r in rows
    ]
    return sorted(scored, key=lambda s: -s.score)
