"""Evaluation manifests: loading, validation, statistics and subsetting.

A manifest is JSONL, one sample per line::

    {"image": "dogs/0001.jpg", "label": "Beagle", "category": "animal",
     "dataset": "Dog-120", "split": "test"}

``dataset`` defaults to the file stem and ``split`` to ``"test"``.  Relative
image paths are resolved against the manifest's directory.  Images are never
read here; only their existence is checked.
"""

from __future__ import annotations

import json
import logging
import os
import random
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence
from urllib.parse import urlparse

from .errors import ManifestError
from .types import SPECIALIZED, Category, Granularity

log = logging.getLogger(__name__)

GRADE_BANDS = ("primary", "secondary", "high")


@dataclass(frozen=True)
class EvalSample:
    image_ref: str
    ground_truth: str
    gt_category: Category
    dataset: str
    split: str = "test"

    def __post_init__(self):
        if not self.ground_truth or not self.ground_truth.strip():
            raise ValueError("ground truth label must be non-empty")

    @property
    def key(self) -> str:
        return f"{self.dataset}\t{self.image_ref}"

    def to_json(self) -> dict:
        return {
            "image": self.image_ref,
            "label": self.ground_truth,
            "category": self.gt_category.value,
            "dataset": self.dataset,
            "split": self.split,
        }


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    granularity: Granularity
    samples: tuple[EvalSample, ...]
    source: str | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.samples:
            raise ManifestError(f"manifest {self.name!r} has no samples")

    @property
    def class_count(self) -> int:
        return len({s.ground_truth for s in self.samples})

    def __len__(self) -> int:
        return len(self.samples)

    def datasets(self) -> dict[str, list[EvalSample]]:
        out: dict[str, list[EvalSample]] = defaultdict(list)
        for s in self.samples:
            out[s.dataset].append(s)
        return dict(sorted(out.items()))


def infer_granularity(samples: Iterable[EvalSample]) -> Granularity:
    """Fine if every sample is an animal or plant, coarse otherwise."""
    return Granularity.FINE if all(s.gt_category in SPECIALIZED for s in samples) else Granularity.COARSE


def _is_remote(ref: str) -> bool:
    return urlparse(ref).scheme in ("http", "https", "s3", "gs")


def _sample_from_row(row: dict, default_dataset: str) -> EvalSample:
    if not isinstance(row, dict):
        raise ValueError("row is not a JSON object")
    for key in ("image", "label", "category"):
        if key not in row:
            raise ValueError(f"missing required field {key!r}")
    image, label = row["image"], row["label"]
    if not isinstance(image, str) or not image:
        raise ValueError("'image' must be a non-empty string")
    if not isinstance(label, str) or not label.strip():
        raise ValueError("'label' must be a non-empty string")
    dataset = row.get("dataset", default_dataset)
    split = row.get("split", "test")
    if not isinstance(dataset, str) or not isinstance(split, str):
        raise ValueError("'dataset' and 'split' must be strings")
    return EvalSample(image, label, Category.parse(row["category"]), dataset, split)


def load_manifest(
    path: str | os.PathLike,
    name: str | None = None,
    granularity: Granularity | str | None = None,
    missing_images: str = "error",
) -> DatasetManifest:
    """Load and validate a JSONL manifest.

    ``missing_images`` is ``"error"``, ``"warn"`` (drop the row) or ``"ignore"``.
    """
    if missing_images not in ("error", "warn", "ignore"):
        raise ValueError("missing_images must be 'error', 'warn' or 'ignore'")
    path = Path(path)
    base = path.parent
    samples: list[EvalSample] = []
    seen: dict[tuple[str, str], int] = {}
    try:
        fh = path.open(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"cannot open manifest: {exc}", path=str(path)) from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                sample = _sample_from_row(json.loads(line), path.stem)
            except (ValueError, TypeError) as exc:
                raise ManifestError(str(exc), line=lineno, path=str(path)) from exc
            dup = (sample.image_ref, sample.ground_truth)
            if dup in seen:
                raise ManifestError(f"duplicate row (first seen on line {seen[dup]})", line=lineno, path=str(path))
            seen[dup] = lineno
            if missing_images != "ignore" and not _is_remote(sample.image_ref):
                if not (base / sample.image_ref).exists():
                    if missing_images == "error":
                        raise ManifestError(f"image not found: {sample.image_ref}", line=lineno, path=str(path))
                    log.warning("%s:%d: image not found, dropping: %s", path, lineno, sample.image_ref)
                    continue
            samples.append(sample)
    if not samples:
        raise ManifestError("manifest has no samples", path=str(path))
    gran = Granularity(granularity) if granularity else infer_granularity(samples)
    return DatasetManifest(name or path.stem, gran, tuple(samples), source=str(path))


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in manifest.samples:
            fh.write(json.dumps(s.to_json(), ensure_ascii=False) + "\n")


def resolve_image(manifest: DatasetManifest, ref: str) -> str:
    if _is_remote(ref) or manifest.source is None:
        return ref
    return str(Path(manifest.source).parent / ref)


# --- statistics ------------------------------------------------------------

@dataclass
class DatasetRow:
    dataset: str
    granularity: Granularity
    classes: int
    samples: int


@dataclass
class ManifestStats:
    total_samples: int
    total_classes: int
    datasets: list[DatasetRow]
    # bucket (split or grade band) -> (distinct labels, samples)
    buckets: dict[str, tuple[int, int]]

    def to_json(self) -> dict:
        return {
            "total_samples": self.total_samples,
            "total_classes": self.total_classes,
            "datasets": [
                {"dataset": r.dataset, "granularity": r.granularity.value,
                 "classes": r.classes, "samples": r.samples}
                for r in self.datasets
            ],
            "buckets": {k: {"objects": o, "images": i} for k, (o, i) in self.buckets.items()},
        }

    def render(self) -> str:
        lines = []
        w = max([len("Dataset")] + [len(r.dataset) for r in self.datasets])
        lines.append(f"{'Dataset':>{w}} | Gran.  | Classes | Samples")
        lines.append("-" * (w + 28))
        for r in self.datasets:
            lines.append(f"{r.dataset:>{w}} | {r.granularity.value:<6} | {r.classes:>7} | {r.samples:>7}")
        lines.append("")
        names = list(self.buckets) + ["total"]
        cw = max(8, *(len(n) for n in names))
        lines.append(" " * 8 + " | " + " | ".join(f"{n.capitalize():>{cw}}" for n in names))
        objects = [o for o, _ in self.buckets.values()] + [self.total_classes]
        images = [i for _, i in self.buckets.values()] + [self.total_samples]
        lines.append(f"{'Objects':>8} | " + " | ".join(f"{v:>{cw}}" for v in objects))
        lines.append(f"{'Images':>8} | " + " | ".join(f"{v:>{cw}}" for v in images))
        return "\n".join(lines)


def summarize(manifest: DatasetManifest) -> ManifestStats:
    """Per-dataset class/sample counts and per-split (or grade band) counts.

    When any split is a grade band, all three bands are reported, empty ones
    with zero counts.
    """
    rows = []
    for name, samples in manifest.datasets().items():
        rows.append(DatasetRow(name, infer_granularity(samples),
                               len({s.ground_truth for s in samples}), len(samples)))
    by_split: dict[str, list[EvalSample]] = defaultdict(list)
    for s in manifest.samples:
        by_split[s.split].append(s)
    order = sorted(by_split)
    if any(k in GRADE_BANDS for k in order):
        order = list(GRADE_BANDS) + [k for k in order if k not in GRADE_BANDS]
    buckets = {
        k: (len({s.ground_truth for s in by_split.get(k, [])}), len(by_split.get(k, [])))
        for k in order
    }
    return ManifestStats(len(manifest), manifest.class_count, rows, buckets)


# --- textbook-object records ----------------------------------------------

@dataclass(frozen=True)
class TextbookObjectRecord:
    object_name: str
    grade_band: str
    image_refs: tuple[str, ...]
    category: Category = Category.OTHER

    def __post_init__(self):
        if not self.object_name.strip():
            raise ValueError("object_name must be non-empty")
        if self.grade_band not in GRADE_BANDS:
            raise ValueError(f"grade_band must be one of {GRADE_BANDS}, got {self.grade_band!r}")
        if not self.image_refs:
            raise ValueError("image_refs must be non-empty")


def load_textbook_records(path: str | os.PathLike) -> list[TextbookObjectRecord]:
    """Read ``{"object_name", "grade_band", "image_refs": [...], "category"?}`` JSONL."""
    records, names = [], {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                rec = TextbookObjectRecord(
                    row["object_name"], row["grade_band"], tuple(row["image_refs"]),
                    Category.parse(row.get("category", "other")),
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise ManifestError(str(exc), line=lineno, path=str(path)) from exc
            if rec.object_name in names:
                raise ManifestError(f"duplicate object_name {rec.object_name!r} (line {names[rec.object_name]})",
                                    line=lineno, path=str(path))
            names[rec.object_name] = lineno
            records.append(rec)
    return records


def textbook_manifest(records: Sequence[TextbookObjectRecord], dataset: str = "TBO") -> DatasetManifest:
    """Expand object records into one sample per image, split = grade band."""
    samples = tuple(
        EvalSample(ref, r.object_name, r.category, dataset, r.grade_band)
        for r in records for ref in r.image_refs
    )
    return DatasetManifest(dataset, Granularity.COARSE, samples)


# --- subsetting ------------------------------------------------------------

def sample_subset(manifest: DatasetManifest, n: int, seed: int = 0) -> DatasetManifest:
    """Stratified random subset of ``n`` samples, deterministic under ``seed``.

    Each label gets floor(n * share) samples; the leftover slots go to the
    labels with the largest fractional remainders (ties broken by the seeded
    RNG).  Samples keep their original manifest order.
    """
    total = len(manifest)
    if n < 0 or n > total:
        raise ValueError(f"cannot sample {n} of {total} samples")
    rng = random.Random(seed)
    by_label: dict[str, list[int]] = defaultdict(list)
    for i, s in enumerate(manifest.samples):
        by_label[s.ground_truth].append(i)
    labels = sorted(by_label)
    quotas = {l: n * len(by_label[l]) // total for l in labels}
    leftover = n - sum(quotas.values())
    tiebreak = {l: rng.random() for l in labels}
    by_remainder = sorted(labels, key=lambda l: (-(n * len(by_label[l]) % total), tiebreak[l]))
    for l in by_remainder[:leftover]:
        quotas[l] += 1
    chosen: list[int] = []
    for l in labels:
        chosen.extend(rng.sample(by_label[l], quotas[l]))
    chosen.sort()
    samples = tuple(manifest.samples[i] for i in chosen)
    if not samples:
        raise ValueError("subset is empty")
    return DatasetManifest(manifest.name, manifest.granularity, samples, manifest.source)


def label_shares(samples: Iterable[EvalSample]) -> dict[str, float]:
    counts = Counter(s.ground_truth for s in samples)
    total = sum(counts.values())
    return {k: v / total for k, v in counts.items()}
