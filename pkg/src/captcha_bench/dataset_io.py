"""Label-file and manifest persistence, deterministic splits, and the
retraining-set mixer.

Label files are plain text, one annotation per line:
``<class_int> <cx> <cy> <w> <h>`` with six fixed decimals, LF endings,
UTF-8. An empty file means a negative image. Manifests are JSON documents
with a schema_version field; record paths are stored relative to the
manifest's directory so a dataset can be moved wholesale.
"""

from __future__ import annotations

import dataclasses
import datetime
import json
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import ClassId, NormBox
from .errors import ConfigError, DataError, LabelParseError

SCHEMA_VERSION = 1

NEGATIVE_BUCKET = "negatives"
BUCKETS: tuple[str, ...] = tuple(c.label for c in ClassId) + (NEGATIVE_BUCKET,)
SPLITS: tuple[str, ...] = ("train", "valid", "test", "none")


def write_labels(path: str | Path, annotations: Sequence[tuple[ClassId, NormBox]]) -> None:
    lines = [
        f"{int(cls)} {box.cx:.6f} {box.cy:.6f} {box.w:.6f} {box.h:.6f}\n"
        for cls, box in annotations
    ]
    Path(path).write_text("".join(lines), encoding="utf-8", newline="\n")


def read_labels(path: str | Path) -> list[tuple[ClassId, NormBox]]:
    """Parse a label file; raises LabelParseError naming the bad line."""
    out: list[tuple[ClassId, NormBox]] = []
    text = Path(path).read_text(encoding="utf-8")
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5:
            raise LabelParseError(path, line_no, f"expected 5 fields, got {len(parts)}")
        try:
            code = int(parts[0])
        except ValueError:
            raise LabelParseError(path, line_no, f"class {parts[0]!r} is not an integer") from None
        if code not in (0, 1, 2, 3):
            raise LabelParseError(path, line_no, f"class {code} outside 0..3")
        try:
            coords = [float(p) for p in parts[1:]]
        except ValueError:
            raise LabelParseError(path, line_no, "non-numeric coordinate") from None
        if any(not 0.0 <= c <= 1.0 for c in coords):
            raise LabelParseError(path, line_no, f"coordinate outside [0, 1]: {coords}")
        try:
            box = NormBox(*coords)
        except DataError as exc:
            raise LabelParseError(path, line_no, str(exc)) from None
        out.append((ClassId(code), box))
    return out


@dataclass
class ManifestRecord:
    """One image in a dataset: file paths, size, split and provenance."""

    image: str
    label: str
    width: int
    height: int
    split: str = "none"
    source: str = "synthetic_composite"
    captcha_class: str | None = None
    webpage_id: str | None = None
    captcha_id: str | None = None

    @property
    def image_id(self) -> str:
        return Path(self.image).stem

    @property
    def bucket(self) -> str:
        return self.captcha_class if self.captcha_class else NEGATIVE_BUCKET

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class DatasetManifest:
    """The persisted index of a dataset.

    ``root`` is where record paths are anchored; it is set by load()/save()
    and never serialized.
    """

    records: list[ManifestRecord] = field(default_factory=list)
    histogram: dict[str, int] = field(default_factory=dict)
    seed: int = 0
    config: dict = field(default_factory=dict)
    created_at: str = ""
    schema_version: int = SCHEMA_VERSION
    root: Path | None = None

    def __post_init__(self):
        paths = [r.image for r in self.records]
        if len(set(paths)) != len(paths):
            raise DataError("duplicate image paths in manifest")

    def counts_by_bucket(self) -> dict[str, int]:
        counts = {b: 0 for b in BUCKETS}
        for r in self.records:
            counts[r.bucket] += 1
        return counts

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "config": self.config,
            "histogram": self.histogram,
            "created_at": self.created_at,
            "records": [r.to_dict() for r in self.records],
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        if not self.created_at:
            self.created_at = datetime.datetime.now(datetime.timezone.utc).isoformat()
        path.write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
            newline="\n",
        )
        self.root = path.parent
        return path

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise DataError(
                f"unsupported manifest schema_version {doc.get('schema_version')!r}"
            )
        records = [ManifestRecord(**r) for r in doc.get("records", [])]
        return cls(
            records=records,
            histogram=doc.get("histogram", {}),
            seed=doc.get("seed", 0),
            config=doc.get("config", {}),
            created_at=doc.get("created_at", ""),
            schema_version=doc["schema_version"],
            root=path.parent,
        )


def recount_histogram(manifest: DatasetManifest) -> dict[str, int]:
    """Recount the class histogram directly from the label files."""
    if manifest.root is None:
        raise DataError("manifest has no root directory to resolve label paths")
    counts = {b: 0 for b in BUCKETS}
    for rec in manifest.records:
        annotations = read_labels(manifest.root / rec.label)
        if not annotations:
            counts[NEGATIVE_BUCKET] += 1
        for cls, _ in annotations:
            counts[cls.label] += 1
    return counts


def verify_manifest(manifest: DatasetManifest) -> None:
    """Self-check: the stored histogram must match a recount from disk."""
    actual = recount_histogram(manifest)
    if actual != manifest.histogram:
        raise DataError(
            f"manifest histogram {manifest.histogram} != label-file recount {actual}"
        )


@dataclass(frozen=True)
class SplitFractions:
    """Train/valid/test fractions; must sum to 1."""

    train: float = 0.7
    valid: float = 0.2
    test: float = 0.1

    def __post_init__(self):
        vals = (self.train, self.valid, self.test)
        if any(not 0.0 <= v <= 1.0 for v in vals):
            raise ConfigError(f"split fractions outside [0, 1]: {vals}")
        if abs(sum(vals) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions sum to {sum(vals)}, expected 1")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.train, self.valid, self.test)


def apportion(n: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of n items over the fractions.

    Counts always sum to n exactly; remainder ties go to the earlier slot.
    """
    if n < 0:
        raise ConfigError("cannot apportion a negative count")
    quotas = [n * f for f in fractions]
    counts = [int(q) for q in quotas]
    leftovers = n - sum(counts)
    order = sorted(
        range(len(fractions)), key=lambda j: (-(quotas[j] - counts[j]), j)
    )
    for j in order[:leftovers]:
        counts[j] += 1
    return counts


def split_dataset(
    manifest: DatasetManifest, fractions: SplitFractions, seed: int
) -> DatasetManifest:
    """Assign every record to train/valid/test, stratified per class bucket.

    Each of the five buckets (four classes plus negatives) is shuffled and
    apportioned independently, so per-class proportions track the global
    fractions within one record per bucket.
    """
    nonzero = sum(1 for f in fractions.as_tuple() if f > 0)
    if len(manifest.records) < nonzero:
        raise ConfigError(
            f"{len(manifest.records)} records cannot fill {nonzero} non-empty splits"
        )
    rng = np.random.default_rng(seed)
    assignment = ["none"] * len(manifest.records)
    split_names = ("train", "valid", "test")
    for bucket in BUCKETS:
        idxs = [i for i, r in enumerate(manifest.records) if r.bucket == bucket]
        if not idxs:
            continue
        perm = rng.permutation(len(idxs))
        counts = apportion(len(idxs), fractions.as_tuple())
        cursor = 0
        for name, count in zip(split_names, counts):
            for k in perm[cursor : cursor + count]:
                assignment[idxs[k]] = name
            cursor += count
    new_records = [
        dataclasses.replace(rec, split=assignment[i])
        for i, rec in enumerate(manifest.records)
    ]
    return DatasetManifest(
        records=new_records,
        histogram=dict(manifest.histogram),
        seed=seed,
        config={**manifest.config, "split": {
            "train": fractions.train, "valid": fractions.valid, "test": fractions.test,
        }},
        root=manifest.root,
    )


def split_counts(manifest: DatasetManifest) -> dict[str, int]:
    counts = {s: 0 for s in SPLITS}
    for r in manifest.records:
        counts[r.split] += 1
    return counts


@dataclass(frozen=True)
class MixSpec:
    """How to blend new-pattern records with resampled old ones.

    The train/valid budget is given either as absolute counts (which must
    sum to new_count + old_count) or as fractions summing to 1.
    """

    new_count: int
    old_count: int
    seed: int = 0
    train_count: int | None = None
    valid_count: int | None = None
    train_frac: float | None = None
    valid_frac: float | None = None

    def __post_init__(self):
        if self.new_count < 0 or self.old_count < 0:
            raise ConfigError("mix counts must be non-negative")
        has_counts = self.train_count is not None and self.valid_count is not None
        has_fracs = self.train_frac is not None and self.valid_frac is not None
        if has_counts == has_fracs:
            raise ConfigError("give either train/valid counts or fractions, not both")
        if has_counts:
            total = self.new_count + self.old_count
            if self.train_count + self.valid_count != total:
                raise ConfigError(
                    f"train+valid = {self.train_count + self.valid_count} "
                    f"but the mix holds {total} records"
                )
            if self.train_count < 0 or self.valid_count < 0:
                raise ConfigError("split counts must be non-negative")
        else:
            if abs(self.train_frac + self.valid_frac - 1.0) > 1e-9:
                raise ConfigError("mix fractions must sum to 1")

    def budget(self) -> tuple[int, int]:
        total = self.new_count + self.old_count
        if self.train_count is not None:
            return (self.train_count, self.valid_count)
        train, valid = apportion(total, (self.train_frac, self.valid_frac))
        return (train, valid)


def mix_for_tuning(
    new_manifest: DatasetManifest,
    old_manifest: DatasetManifest,
    spec: MixSpec,
    out_root: str | Path | None = None,
) -> DatasetManifest:
    """Build a tuning dataset: all new records plus a seeded sample of old ones.

    Old records are drawn uniformly without replacement. The combined set
    is split into train/valid per the spec. When out_root is given, record
    paths are rewritten relative to it so the manifest can be saved there.
    """
    if len(new_manifest.records) < spec.new_count:
        raise DataError(
            f"need {spec.new_count} new records, only {len(new_manifest.records)} available"
        )
    if len(old_manifest.records) < spec.old_count:
        raise DataError(
            f"need {spec.old_count} old records, only {len(old_manifest.records)} available"
        )
    rng = np.random.default_rng(spec.seed)
    picked = rng.choice(len(old_manifest.records), size=spec.old_count, replace=False)
    picked_idx = sorted(int(i) for i in picked)

    def anchored(rec: ManifestRecord, root: Path | None) -> ManifestRecord:
        if out_root is None or root is None:
            return dataclasses.replace(rec)
        return dataclasses.replace(
            rec,
            image=os.path.relpath(root / rec.image, out_root),
            label=os.path.relpath(root / rec.label, out_root),
        )

    combined = [
        anchored(r, new_manifest.root)
        for r in new_manifest.records[: spec.new_count]
    ]
    combined += [anchored(old_manifest.records[i], old_manifest.root) for i in picked_idx]

    train_n, valid_n = spec.budget()
    perm = rng.permutation(len(combined))
    for pos, k in enumerate(perm):
        combined[k].split = "train" if pos < train_n else "valid"

    histogram = {b: 0 for b in BUCKETS}
    for rec in combined:
        histogram[rec.bucket] += 1
    return DatasetManifest(
        records=combined,
        histogram=histogram,
        seed=spec.seed,
        config={
            "mix": {
                "new_count": spec.new_count,
                "old_count": spec.old_count,
                "train": train_n,
                "valid": valid_n,
            }
        },
        root=Path(out_root) if out_root is not None else None,
    )


def materialize_split(
    manifest: DatasetManifest, out_root: str | Path
) -> DatasetManifest:
    """Copy a split-assigned dataset into images/{split}/, labels/{split}/.

    Basenames must be unique within each split. Returns the manifest
    rewritten against the new layout (not yet saved).
    """
    if manifest.root is None:
        raise DataError("manifest has no root directory; load or save it first")
    out_root = Path(out_root)
    seen: set[tuple[str, str]] = set()
    new_records: list[ManifestRecord] = []
    for rec in manifest.records:
        key = (rec.split, Path(rec.image).name)
        if key in seen:
            raise DataError(f"duplicate basename {key[1]!r} in split {rec.split!r}")
        seen.add(key)
        img_rel = Path("images") / rec.split / Path(rec.image).name
        lbl_rel = Path("labels") / rec.split / Path(rec.label).name
        for rel, src in ((img_rel, manifest.root / rec.image), (lbl_rel, manifest.root / rec.label)):
            dst = out_root / rel
            dst.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(src, dst)
        new_records.append(
            dataclasses.replace(rec, image=str(img_rel), label=str(lbl_rel))
        )
    return DatasetManifest(
        records=new_records,
        histogram=dict(manifest.histogram),
        seed=manifest.seed,
        config=dict(manifest.config),
        root=out_root,
    )
