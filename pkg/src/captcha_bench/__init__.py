"""Dataset synthesis, image slicing and detection evaluation for webpage
CAPTCHA detectors."""

from .core import (
    CLASS_NAMES,
    ClassId,
    Detection,
    GroundTruth,
    ImageMeta,
    ImageSource,
    NormBox,
    PixelBox,
    to_norm,
    to_pixel,
)
from .dataset_io import (
    DatasetManifest,
    ManifestRecord,
    MixSpec,
    SplitFractions,
    apportion,
    mix_for_tuning,
    read_labels,
    split_dataset,
    write_labels,
)
from .detectors import (
    DetectorRequest,
    DetectorResponse,
    ExternalProcessDetector,
    OracleDetector,
    OracleNoise,
)
from .metrics import (
    MatchResult,
    MetricsReport,
    ModelScoreRow,
    RankWeights,
    average_precision,
    confusion_matrix,
    f1,
    iou,
    match_detections,
    mean_ap,
    pr_curve,
    precision,
    rank_models,
    recall,
)
from .pipeline import EvalItem, EvalRunConfig, evaluate_pipeline, items_from_dirs, items_from_manifest
from .slicing import SliceGrid, SliceParams, axis_slices, build_grid, merge_detections, remap_detection
from .synthesis import SynthConfig, build_dataset, composite

__version__ = "0.1.0"

__all__ = [
    "CLASS_NAMES",
    "ClassId",
    "DatasetManifest",
    "Detection",
    "DetectorRequest",
    "DetectorResponse",
    "EvalItem",
    "EvalRunConfig",
    "ExternalProcessDetector",
    "GroundTruth",
    "ImageMeta",
    "ImageSource",
    "ManifestRecord",
    "MatchResult",
    "MetricsReport",
    "MixSpec",
    "ModelScoreRow",
    "NormBox",
    "OracleDetector",
    "OracleNoise",
    "PixelBox",
    "RankWeights",
    "SliceGrid",
    "SliceParams",
    "SplitFractions",
    "SynthConfig",
    "apportion",
    "average_precision",
    "axis_slices",
    "build_dataset",
    "build_grid",
    "composite",
    "confusion_matrix",
    "evaluate_pipeline",
    "f1",
    "iou",
    "items_from_dirs",
    "items_from_manifest",
    "match_detections",
    "mean_ap",
    "merge_detections",
    "mix_for_tuning",
    "pr_curve",
    "precision",
    "rank_models",
    "read_labels",
    "recall",
    "remap_detection",
    "split_dataset",
    "to_norm",
    "to_pixel",
    "write_labels",
]
