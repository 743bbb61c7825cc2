"""Command-line entry point.

Subcommands cover the full workflow: ``synth`` builds a synthetic
dataset, ``split`` assigns and materializes train/valid/test, ``slice``
exports a debug slice grid, ``eval`` runs a detector over a dataset and
writes metrics.json, ``mix`` blends a tuning dataset, ``rank`` orders
models by the weighted score.

A JSON config document may supply any option (flags win); outputs are
JSON plus plain-text label files. Exit codes: 0 success, 1 usage or
config error, 2 data error, 3 detector failure. The last stderr line is
always a one-line JSON status record.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shlex
import sys
from pathlib import Path

from . import dataset_io, synthesis
from .core import ClassId, ImageMeta
from .detectors import ExternalProcessDetector, OracleDetector, OracleNoise
from .errors import (
    CaptchaBenchError,
    ConfigError,
    DataError,
    DetectorError,
)
from .metrics import ModelScoreRow, RankWeights, pr_curve, rank_models
from .pipeline import EvalRunConfig, evaluate_pipeline, items_from_dirs, items_from_manifest
from .slicing import SliceParams, build_grid, export_slices

log = logging.getLogger("captcha_bench")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DETECTOR = 3

CONFIG_SECTIONS = ("global", "synth", "split", "slice", "eval", "mix", "rank")


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        raise UsageError(message)


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    unknown = set(doc) - set(CONFIG_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return doc


def _opt(args: argparse.Namespace, section: dict, key: str, default):
    """Flag value if given, else config-file value, else default."""
    v = getattr(args, key, None)
    if v is not None:
        return v
    if key in section:
        return section[key]
    return default


def _section(config: dict, name: str, known: set[str]) -> dict:
    sec = config.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    unknown = set(sec) - known
    if unknown:
        raise ConfigError(f"unknown keys in config section {name!r}: {sorted(unknown)}")
    return sec


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8", newline="\n"
    )


def _parse_captcha_dirs(root: str | None, spec: str | None) -> dict[ClassId, Path]:
    dirs: dict[ClassId, Path] = {}
    if root:
        for cls in ClassId:
            dirs[cls] = Path(root) / cls.label
    if spec:
        for part in spec.split(","):
            name, _, value = part.partition("=")
            if not value:
                raise UsageError(f"bad captcha dir entry {part!r}, expected class=dir")
            try:
                dirs[ClassId.from_name(name.strip())] = Path(value.strip())
            except ValueError as exc:
                raise UsageError(str(exc)) from None
    if len(dirs) != len(ClassId):
        raise UsageError("captcha directories required for all four classes")
    return dirs


def _parse_weights(spec: str | None) -> RankWeights:
    if not spec:
        return RankWeights()
    aliases = {"f1": "f1", "map": "map", "p": "precision", "precision": "precision",
               "r": "recall", "recall": "recall"}
    values: dict[str, float] = {}
    for part in spec.split(","):
        name, _, value = part.partition("=")
        key = aliases.get(name.strip().lower())
        if key is None or not value:
            raise UsageError(f"bad weight entry {part!r}, expected name=value")
        try:
            values[key] = float(value)
        except ValueError:
            raise UsageError(f"weight {part!r} is not a number") from None
    return RankWeights(**values)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def _cmd_synth(args: argparse.Namespace, config: dict) -> int:
    sec = _section(config, "synth", {
        "webpages", "captchas_root", "captchas", "per_class", "negatives",
        "scale_min", "scale_max", "margin", "seed", "out",
    })
    webpages = _opt(args, sec, "webpages", None)
    if not webpages:
        raise UsageError("synth needs --webpages")
    out = Path(_opt(args, sec, "out", "dataset"))
    cfg = synthesis.SynthConfig(
        scale_range=(
            float(_opt(args, sec, "scale_min", 0.15)),
            float(_opt(args, sec, "scale_max", 0.6)),
        ),
        per_class_target=int(_opt(args, sec, "per_class", 0)),
        negative_count=int(_opt(args, sec, "negatives", 0)),
        rng_seed=int(_opt(args, sec, "seed", 0)),
        margin=int(_opt(args, sec, "margin", 0)),
    )
    dirs = _parse_captcha_dirs(
        _opt(args, sec, "captchas_root", None), _opt(args, sec, "captchas", None)
    )
    manifest = synthesis.build_dataset(webpages, dirs, out, cfg)
    dataset_io.verify_manifest(manifest)
    log.info("wrote %d records to %s", len(manifest.records), out / "manifest.json")
    return EXIT_OK


def _cmd_split(args: argparse.Namespace, config: dict) -> int:
    sec = _section(config, "split", {"manifest", "train", "valid", "test", "seed", "out"})
    manifest_path = _opt(args, sec, "manifest", None)
    if not manifest_path:
        raise UsageError("split needs --manifest")
    out = _opt(args, sec, "out", None)
    if not out:
        raise UsageError("split needs --out")
    fractions = dataset_io.SplitFractions(
        train=float(_opt(args, sec, "train", 0.7)),
        valid=float(_opt(args, sec, "valid", 0.2)),
        test=float(_opt(args, sec, "test", 0.1)),
    )
    manifest = dataset_io.DatasetManifest.load(manifest_path)
    assigned = dataset_io.split_dataset(manifest, fractions, int(_opt(args, sec, "seed", 0)))
    materialized = dataset_io.materialize_split(assigned, out)
    materialized.save(Path(out) / "manifest.json")
    counts = dataset_io.split_counts(materialized)
    log.info("split counts: %s", counts)
    return EXIT_OK


def _cmd_slice(args: argparse.Namespace, config: dict) -> int:
    sec = _section(config, "slice", {
        "image", "slice_size", "overlap", "multiplier", "out",
    })
    image = _opt(args, sec, "image", None)
    if not image:
        raise UsageError("slice needs --image")
    out = Path(_opt(args, sec, "out", "slices"))
    params = SliceParams(
        slice_size=int(_opt(args, sec, "slice_size", 640)),
        overlap=float(_opt(args, sec, "overlap", 0.2)),
        activation_multiplier=float(_opt(args, sec, "multiplier", 3.0)),
    )
    from PIL import Image

    path = Path(image)
    if not path.exists():
        raise DataError(f"image {path} does not exist")
    with Image.open(path) as im:
        width, height = im.size
    meta = ImageMeta(path.stem, width, height)
    grid = build_grid(meta, params)
    written = export_slices(path, grid, out)
    _write_json(out / f"{path.stem}_grid.json", {
        "image_id": grid.image_id,
        "columns": [list(c) for c in grid.columns],
        "rows": [list(r) for r in grid.rows],
        "activated": grid.activated,
        "slices": len(written),
    })
    log.info("wrote %d slices to %s", len(written), out)
    return EXIT_OK


def _build_detector_factory(args, sec, items):
    kind = _opt(args, sec, "detector", "oracle")
    if kind == "oracle":
        noise_name = _opt(args, sec, "noise", None)
        if noise_name not in (None, "zero"):
            raise UsageError(f"unknown noise preset {noise_name!r}")
        if noise_name == "zero":
            noise = OracleNoise.zero()
        else:
            noise = OracleNoise(
                jitter_px=float(_opt(args, sec, "jitter_px", 0.0)),
                drop_rate=float(_opt(args, sec, "drop_rate", 0.0)),
                fp_rate=float(_opt(args, sec, "fp_rate", 0.0)),
                min_visible_px=float(_opt(args, sec, "min_visible_px", 0.0)),
                downscale_drop=float(_opt(args, sec, "downscale_drop", 0.0)),
                conf_lo=float(_opt(args, sec, "conf_lo", 0.99)),
                conf_hi=float(_opt(args, sec, "conf_hi", 0.99)),
            )
        truth = {item.meta.image_id: (item.meta, item.gts) for item in items}
        oracle = OracleDetector(
            truth,
            noise,
            input_size=int(_opt(args, sec, "input_size", 640)),
            seed=int(_opt(args, sec, "seed", 0)),
        )
        return lambda: oracle
    if kind == "external":
        command = _opt(args, sec, "command", None)
        if not command:
            raise UsageError("external detector needs --command")
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        timeout = float(_opt(args, sec, "timeout", 30.0))
        return lambda: ExternalProcessDetector(argv, timeout_s=timeout)
    raise UsageError(f"unknown detector kind {kind!r}")


def _cmd_eval(args: argparse.Namespace, config: dict) -> int:
    sec = _section(config, "eval", {
        "dataset", "images", "labels", "detector", "noise", "command", "timeout",
        "jitter_px", "drop_rate", "fp_rate", "min_visible_px", "downscale_drop",
        "conf_lo", "conf_hi", "input_size", "slice", "slice_size", "overlap",
        "multiplier", "merge_iou", "match_iou", "confusion_conf", "pr_curves",
        "seed", "jobs", "out", "split",
    })
    dataset = _opt(args, sec, "dataset", None)
    images = _opt(args, sec, "images", None)
    labels = _opt(args, sec, "labels", None)
    if dataset:
        manifest = dataset_io.DatasetManifest.load(Path(dataset) / "manifest.json")
        items = items_from_manifest(manifest, _opt(args, sec, "split", None))
    elif images and labels:
        items = items_from_dirs(images, labels)
    else:
        raise UsageError("eval needs --dataset or both --images and --labels")
    if not items:
        raise DataError("no images to evaluate")

    jobs = int(_opt(args, sec, "jobs", 1))
    cfg = EvalRunConfig(
        slicing_enabled=bool(_opt(args, sec, "slice", False)),
        slice_params=SliceParams(
            slice_size=int(_opt(args, sec, "slice_size", 640)),
            overlap=float(_opt(args, sec, "overlap", 0.2)),
            activation_multiplier=float(_opt(args, sec, "multiplier", 3.0)),
        ),
        merge_iou=float(_opt(args, sec, "merge_iou", 0.5)),
        match_iou=float(_opt(args, sec, "match_iou", 0.5)),
        confusion_confidence=float(_opt(args, sec, "confusion_conf", 0.25)),
        parallelism=jobs,
    )
    factory = _build_detector_factory(args, sec, items)
    echo = {
        "detector": _opt(args, sec, "detector", "oracle"),
        "seed": int(_opt(args, sec, "seed", 0)),
    }
    want_curves = bool(_opt(args, sec, "pr_curves", False))
    report = evaluate_pipeline(items, factory, cfg, config_echo=echo,
                               collect_curves=want_curves)

    out = Path(_opt(args, sec, "out", "."))
    _write_json(out / "metrics.json", report.to_dict())
    if want_curves:
        curves_doc = {
            cls_label: [
                {"confidence": p.confidence, "precision": p.precision, "recall": p.recall}
                for p in pts
            ]
            for cls_label, pts in (report.pr_curves or {}).items()
        }
        _write_json(out / "pr_curves.json", curves_doc)
    log.info("metrics written to %s", out / "metrics.json")
    return EXIT_OK


def _cmd_mix(args: argparse.Namespace, config: dict) -> int:
    sec = _section(config, "mix", {
        "new", "old", "new_count", "old_count", "train_count", "valid_count",
        "train_frac", "valid_frac", "seed", "out",
    })
    new_path = _opt(args, sec, "new", None)
    old_path = _opt(args, sec, "old", None)
    if not new_path or not old_path:
        raise UsageError("mix needs --new and --old manifests")
    out = _opt(args, sec, "out", None)
    if not out:
        raise UsageError("mix needs --out")
    new_manifest = dataset_io.DatasetManifest.load(new_path)
    old_manifest = dataset_io.DatasetManifest.load(old_path)

    def _maybe_int(key):
        v = _opt(args, sec, key, None)
        return None if v is None else int(v)

    def _maybe_float(key):
        v = _opt(args, sec, key, None)
        return None if v is None else float(v)

    spec = dataset_io.MixSpec(
        new_count=int(_opt(args, sec, "new_count", len(new_manifest.records))),
        old_count=int(_opt(args, sec, "old_count", 0)),
        seed=int(_opt(args, sec, "seed", 0)),
        train_count=_maybe_int("train_count"),
        valid_count=_maybe_int("valid_count"),
        train_frac=_maybe_float("train_frac"),
        valid_frac=_maybe_float("valid_frac"),
    )
    mixed = dataset_io.mix_for_tuning(new_manifest, old_manifest, spec, out_root=out)
    mixed.save(Path(out) / "manifest.json")
    log.info("mixed manifest with %d records written to %s", len(mixed.records), out)
    return EXIT_OK


def _cmd_rank(args: argparse.Namespace, config: dict) -> int:
    sec = _section(config, "rank", {"input", "weights", "out"})
    input_path = _opt(args, sec, "input", None)
    if not input_path:
        raise UsageError("rank needs --input")
    try:
        doc = json.loads(Path(input_path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read metrics table {input_path}: {exc}") from exc
    rows_doc = doc["rows"] if isinstance(doc, dict) and "rows" in doc else doc
    if not isinstance(rows_doc, list):
        raise DataError("metrics table must be a list of rows or {rows: [...]}")
    try:
        rows = [
            ModelScoreRow(
                model=r["model"],
                precision=float(r["precision"]),
                recall=float(r["recall"]),
                f1=float(r["f1"]),
                map=float(r["map"]),
            )
            for r in rows_doc
        ]
    except (KeyError, TypeError) as exc:
        raise DataError(f"bad metrics table row: {exc}") from exc
    weights = _parse_weights(_opt(args, sec, "weights", None))
    ranking = rank_models(rows, weights)
    doc_out = {
        "weights": {
            "f1": weights.f1, "map": weights.map,
            "precision": weights.precision, "recall": weights.recall,
        },
        "ranking": [
            {"rank": i + 1, "model": r.model, "score": r.score}
            for i, r in enumerate(ranking)
        ],
    }
    out = Path(_opt(args, sec, "out", "."))
    _write_json(out / "ranking.json", doc_out)
    for entry in doc_out["ranking"]:
        print(f"{entry['rank']:2d}. {entry['model']:<16s} {entry['score']:.4f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser assembly
# --------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config document; flags override its values")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--out", help="output directory")
    p.add_argument(
        "--log-level",
        help="logging level; also via CAPTCHA_BENCH_LOG (default WARNING)",
    )


def build_parser() -> _Parser:
    parser = _Parser(prog="captcha-bench", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", help="build a synthetic composite dataset")
    _add_common(p)
    p.add_argument("--webpages", help="directory of webpage screenshots")
    p.add_argument("--captchas-root", dest="captchas_root",
                   help="directory with text/ puzzle/ image/ button/ subdirectories")
    p.add_argument("--captchas", help="per-class dirs, e.g. text=d1,puzzle=d2,...")
    p.add_argument("--per-class", dest="per_class", type=int,
                   help="composites per class (default 0)")
    p.add_argument("--negatives", type=int, help="plain webpage images to add (default 0)")
    p.add_argument("--scale-min", dest="scale_min", type=float,
                   help="min paste width as fraction of page width (default 0.15)")
    p.add_argument("--scale-max", dest="scale_max", type=float,
                   help="max paste width as fraction of page width (default 0.6)")
    p.add_argument("--margin", type=int, help="margin from page edge in px (default 0)")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("split", help="assign and materialize train/valid/test")
    _add_common(p)
    p.add_argument("--manifest", help="manifest.json of the dataset to split")
    p.add_argument("--train", type=float, help="train fraction (default 0.7)")
    p.add_argument("--valid", type=float, help="valid fraction (default 0.2)")
    p.add_argument("--test", type=float, help="test fraction (default 0.1)")
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("slice", help="export a debug slice grid for one image")
    _add_common(p)
    p.add_argument("--image", help="image file to slice")
    p.add_argument("--slice-size", dest="slice_size", type=int,
                   help="slice size in px (default 640)")
    p.add_argument("--overlap", type=float, help="overlap fraction (default 0.2)")
    p.add_argument("--multiplier", type=float,
                   help="activation multiplier (default 3.0)")
    p.set_defaults(func=_cmd_slice)

    p = sub.add_parser("eval", help="run a detector over a dataset and write metrics")
    _add_common(p)
    p.add_argument("--dataset", help="dataset root containing manifest.json")
    p.add_argument("--images", help="images directory (with --labels)")
    p.add_argument("--labels", help="labels directory (with --images)")
    p.add_argument("--split", help="restrict manifest evaluation to one split")
    p.add_argument("--detector", choices=("oracle", "external"),
                   help="detector backend (default oracle)")
    p.add_argument("--noise", help="oracle noise preset; only 'zero'")
    p.add_argument("--jitter-px", dest="jitter_px", type=float,
                   help="oracle: max box jitter in px (default 0)")
    p.add_argument("--drop-rate", dest="drop_rate", type=float,
                   help="oracle: probability of dropping a ground truth (default 0)")
    p.add_argument("--fp-rate", dest="fp_rate", type=float,
                   help="oracle: expected false positives per call (default 0)")
    p.add_argument("--min-visible-px", dest="min_visible_px", type=float,
                   help="oracle: visibility floor after conceptual resize (default 0)")
    p.add_argument("--downscale-drop", dest="downscale_drop", type=float,
                   help="oracle: drop probability under the visibility floor (default 0)")
    p.add_argument("--conf-lo", dest="conf_lo", type=float,
                   help="oracle: confidence range low end (default 0.99)")
    p.add_argument("--conf-hi", dest="conf_hi", type=float,
                   help="oracle: confidence range high end (default 0.99)")
    p.add_argument("--input-size", dest="input_size", type=int,
                   help="detector input size for the visibility model (default 640)")
    p.add_argument("--command", help="external: adapter command line")
    p.add_argument("--timeout", type=float, help="external: reply timeout s (default 30)")
    p.add_argument("--slice", action="store_const", const=True,
                   help="enable slicing of oversized images")
    p.add_argument("--slice-size", dest="slice_size", type=int,
                   help="slice size in px (default 640)")
    p.add_argument("--overlap", type=float, help="slice overlap fraction (default 0.2)")
    p.add_argument("--multiplier", type=float,
                   help="slicing activation multiplier (default 3.0)")
    p.add_argument("--merge-iou", dest="merge_iou", type=float,
                   help="cross-slice duplicate suppression IoU (default 0.5)")
    p.add_argument("--match-iou", dest="match_iou", type=float,
                   help="TP matching IoU threshold (default 0.5)")
    p.add_argument("--confusion-conf", dest="confusion_conf", type=float,
                   help="confusion-matrix confidence threshold (default 0.25)")
    p.add_argument("--pr-curves", dest="pr_curves", action="store_const", const=True,
                   help="also write pr_curves.json with raw curve points")
    p.add_argument("--jobs", type=int, help="worker pool size (default 1)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("mix", help="blend new records with resampled old ones")
    _add_common(p)
    p.add_argument("--new", help="manifest of the new-pattern dataset")
    p.add_argument("--old", help="manifest of the previous training dataset")
    p.add_argument("--new-count", dest="new_count", type=int,
                   help="records to take from the new manifest (default: all)")
    p.add_argument("--old-count", dest="old_count", type=int,
                   help="records to sample from the old manifest (default 0)")
    p.add_argument("--train-count", dest="train_count", type=int,
                   help="absolute train budget")
    p.add_argument("--valid-count", dest="valid_count", type=int,
                   help="absolute valid budget")
    p.add_argument("--train-frac", dest="train_frac", type=float,
                   help="train fraction (with --valid-frac)")
    p.add_argument("--valid-frac", dest="valid_frac", type=float,
                   help="valid fraction (with --train-frac)")
    p.set_defaults(func=_cmd_mix)

    p = sub.add_parser("rank", help="rank models by weighted arithmetic mean")
    _add_common(p)
    p.add_argument("--input", help="JSON metrics table (list of rows or {rows: []})")
    p.add_argument("--weights",
                   help="weights, e.g. f1=0.5,map=0.25,p=0.125,r=0.125 (the default)")
    p.set_defaults(func=_cmd_rank)

    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    command = "?"
    try:
        args = parser.parse_args(argv)
        command = args.subcommand
        config = _load_config(args.config)
        sec_global = _section(config, "global", {"seed", "jobs", "log_level", "out"})
        level = (
            getattr(args, "log_level", None)
            or sec_global.get("log_level")
            or os.environ.get("CAPTCHA_BENCH_LOG")
            or "WARNING"
        )
        logging.basicConfig(level=getattr(logging, str(level).upper(), logging.WARNING))
        code = args.func(args, config)
        _final_record(command, code, "ok")
        return code
    except UsageError as exc:
        _final_record(command, EXIT_USAGE, "usage error", str(exc))
        return EXIT_USAGE
    except ConfigError as exc:
        _final_record(command, EXIT_USAGE, "config error", str(exc))
        return EXIT_USAGE
    except DetectorError as exc:
        _final_record(command, EXIT_DETECTOR, "detector failure", str(exc))
        return EXIT_DETECTOR
    except (DataError, CaptchaBenchError) as exc:
        _final_record(command, EXIT_DATA, "data error", str(exc))
        return EXIT_DATA


def _final_record(command: str, code: int, status: str, message: str = "") -> None:
    print(
        json.dumps(
            {"record": "final", "command": command, "exit_code": code,
             "status": status, "message": message},
            sort_keys=True,
        ),
        file=sys.stderr,
    )


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
