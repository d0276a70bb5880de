"""Class-centroid vector index for fine-grained recognition.

Each class is represented by the mean of its training image embeddings.
Before search, centroids and queries are shifted by the global mean (the
equal-weight mean of all class centroids) and L2-normalized, so the score of
a centroid is the cosine similarity in the shifted space.

The index is immutable once finalized; concurrent ``search`` calls need no
locking.  Reloading an index in a running process is done by swapping the
whole object.
"""

from __future__ import annotations

import io
import json
import math
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from .errors import (
    BadMagicError,
    ChecksumError,
    DimensionMismatchError,
    EmptyIndexError,
    IndexFormatError,
    ManifestError,
    NonFiniteEmbeddingError,
    TruncatedIndexError,
    UnsupportedVersionError,
)
from .types import SPECIALIZED, Category

MAGIC = b"HYMX"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sIII")
_CATEGORY_CODES = {Category.ANIMAL: 0, Category.PLANT: 1}
_CODE_CATEGORIES = {v: k for k, v in _CATEGORY_CODES.items()}

# mean-subtracted vectors shorter than this (relative to the inputs) are degenerate
_DEGENERATE_RTOL = 1e-12
# scores closer than this are treated as tied, so tie-breaking is immune to BLAS ordering
_TIE_ATOL = 1e-12


def as_embedding(values: Iterable[float] | np.ndarray, dim: int | None = None) -> np.ndarray:
    """Validate ``values`` as an embedding vector and return a float64 copy."""
    try:
        vec = np.array(values, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise NonFiniteEmbeddingError(f"embedding is not numeric: {exc}") from None
    if vec.ndim != 1 or vec.size == 0:
        raise DimensionMismatchError(f"embedding must be a non-empty 1-D vector, got shape {vec.shape}")
    if dim is not None and vec.size != dim:
        raise DimensionMismatchError(f"expected dim {dim}, got {vec.size}")
    if not np.all(np.isfinite(vec)):
        raise NonFiniteEmbeddingError("embedding contains NaN or Inf")
    return vec


@dataclass(frozen=True)
class LabeledEmbedding:
    label: str
    category: Category
    embedding: np.ndarray

    @classmethod
    def from_json(cls, obj: dict) -> "LabeledEmbedding":
        label = obj["label"]
        if not isinstance(label, str) or not label:
            raise ValueError("label must be a non-empty string")
        category = Category.parse(obj["category"])
        if category not in SPECIALIZED:
            raise ValueError(f"category must be animal or plant, got {category.value!r}")
        return cls(label, category, as_embedding(obj["embedding"]))


@dataclass(frozen=True)
class ClassCentroid:
    label: str
    category: Category
    raw_centroid: np.ndarray
    sample_count: int
    degenerate: bool = False


class Match(NamedTuple):
    """Best centroid for a query.  ``label`` is None when nothing matched."""

    label: str | None
    category: Category | None
    similarity: float

    @property
    def degenerate(self) -> bool:
        return self.label is None

    @classmethod
    def no_match(cls) -> "Match":
        return cls(None, None, -1.0)

    def to_json(self) -> dict:
        return {
            "label": self.label,
            "category": self.category.value if self.category else None,
            "similarity": self.similarity,
            "degenerate": self.degenerate,
        }

    @classmethod
    def from_json(cls, obj: dict | None) -> "Match | None":
        if obj is None:
            return None
        if obj.get("label") is None:
            return cls.no_match()
        return cls(obj["label"], Category.parse(obj["category"]), float(obj["similarity"]))


class ProcessedQuery(NamedTuple):
    vector: np.ndarray
    degenerate: bool


def _unit(vec: np.ndarray, scale: float) -> tuple[np.ndarray, bool]:
    """L2-normalize ``vec``; flag it degenerate if it is (numerically) zero."""
    norm = math.sqrt(float(np.dot(vec, vec)))
    if norm == 0.0 or norm <= _DEGENERATE_RTOL * scale:
        return np.zeros_like(vec), True
    return vec / norm, False


def _two_sum_add(partials: list[np.ndarray], x: np.ndarray) -> list[np.ndarray]:
    # Keeps sum(partials) exactly equal to the true running sum, elementwise.
    out = []
    for p in partials:
        hi = x + p
        bp = hi - x
        lo = (x - (hi - bp)) + (p - bp)
        if np.any(lo):
            out.append(lo)
        x = hi
    out.append(x)
    return out


def _exact_sum(partials: list[np.ndarray]) -> np.ndarray:
    stacked = np.stack(partials)
    return np.array([math.fsum(stacked[:, j]) for j in range(stacked.shape[1])])


class IndexBuilder:
    """Single-writer accumulator of per-class embedding sums.

    Sums are kept exactly (error-free transformations), so the finalized
    index does not depend on the order samples arrive in.
    """

    def __init__(self, dim: int | None = None):
        self.dim = dim
        self._sums: dict[str, list[np.ndarray]] = {}
        self._counts: dict[str, int] = {}
        self._categories: dict[str, Category] = {}

    def __len__(self) -> int:
        return len(self._counts)

    def accumulate(self, sample: LabeledEmbedding) -> "IndexBuilder":
        vec = as_embedding(sample.embedding, self.dim)
        if not sample.label:
            raise ValueError("label must be non-empty")
        category = Category.parse(sample.category)
        if category not in SPECIALIZED:
            raise ValueError(f"index classes must be animal or plant, got {category.value!r}")
        known = self._categories.get(sample.label)
        if known is not None and known != category:
            raise ValueError(
                f"label {sample.label!r} seen with categories {known.value} and {category.value}"
            )
        if self.dim is None:
            self.dim = vec.size
        self._categories[sample.label] = category
        self._sums[sample.label] = _two_sum_add(self._sums.get(sample.label, []), vec)
        self._counts[sample.label] = self._counts.get(sample.label, 0) + 1
        return self

    def add(self, label: str, category: Category | str, embedding) -> "IndexBuilder":
        return self.accumulate(LabeledEmbedding(label, Category.parse(category), embedding))

    def extend(self, samples: Iterable[LabeledEmbedding]) -> "IndexBuilder":
        for s in samples:
            self.accumulate(s)
        return self

    def finalize(self) -> "CentroidIndex":
        if not self._counts:
            raise EmptyIndexError("cannot finalize an index with no classes")
        labels = sorted(self._counts)
        raw = np.stack([_exact_sum(self._sums[l]) / self._counts[l] for l in labels])
        return CentroidIndex.from_raw(
            labels,
            [self._categories[l] for l in labels],
            raw,
            [self._counts[l] for l in labels],
        )


class CentroidIndex:
    """Finalized, immutable centroid index.  Rows are sorted by label."""

    def __init__(
        self,
        labels: Sequence[str],
        categories: Sequence[Category],
        raw: np.ndarray,
        sample_counts: Sequence[int],
        degenerate: Sequence[bool],
        processed: np.ndarray,
        global_mean: np.ndarray,
        format_version: int = FORMAT_VERSION,
    ):
        n = len(labels)
        if n == 0:
            raise EmptyIndexError("index has no classes")
        if list(labels) != sorted(labels) or len(set(labels)) != n:
            raise ValueError("labels must be unique and sorted")
        self.labels: tuple[str, ...] = tuple(labels)
        self.categories: tuple[Category, ...] = tuple(categories)
        self.sample_counts: tuple[int, ...] = tuple(int(c) for c in sample_counts)
        self.degenerate = np.array(degenerate, dtype=bool)
        self.raw = np.array(raw, dtype=np.float64)
        self.processed = np.array(processed, dtype=np.float64)
        self.global_mean = np.array(global_mean, dtype=np.float64)
        self.dim = int(self.global_mean.size)
        self.format_version = format_version
        if self.raw.shape != (n, self.dim) or self.processed.shape != (n, self.dim):
            raise DimensionMismatchError("centroid arrays do not match label count and dim")
        for arr in (self.degenerate, self.raw, self.processed, self.global_mean):
            arr.setflags(write=False)
        self._row = {label: i for i, label in enumerate(self.labels)}

    @classmethod
    def from_raw(
        cls,
        labels: Sequence[str],
        categories: Sequence[Category],
        raw: np.ndarray,
        sample_counts: Sequence[int],
    ) -> "CentroidIndex":
        raw = np.asarray(raw, dtype=np.float64)
        global_mean = np.array([math.fsum(raw[:, j]) for j in range(raw.shape[1])]) / raw.shape[0]
        processed = np.empty_like(raw)
        degenerate = []
        for i in range(raw.shape[0]):
            scale = float(np.linalg.norm(raw[i])) + float(np.linalg.norm(global_mean))
            processed[i], flag = _unit(raw[i] - global_mean, scale)
            degenerate.append(flag)
        return cls(labels, categories, raw, sample_counts, degenerate, processed, global_mean)

    # -- inspection -------------------------------------------------------

    def __len__(self) -> int:
        return len(self.labels)

    def __contains__(self, label: str) -> bool:
        return label in self._row

    @property
    def centroids(self) -> list[ClassCentroid]:
        return [
            ClassCentroid(l, self.categories[i], self.raw[i], self.sample_counts[i], bool(self.degenerate[i]))
            for i, l in enumerate(self.labels)
        ]

    def centroid(self, label: str) -> ClassCentroid:
        i = self._row[label]
        return ClassCentroid(label, self.categories[i], self.raw[i], self.sample_counts[i], bool(self.degenerate[i]))

    def processed_vector(self, label: str) -> np.ndarray:
        return self.processed[self._row[label]]

    def stats(self) -> dict:
        per_cat = {c.value: 0 for c in (Category.ANIMAL, Category.PLANT)}
        for c in self.categories:
            per_cat[c.value] += 1
        return {
            "classes": len(self),
            "dim": self.dim,
            "degenerate": int(self.degenerate.sum()),
            "categories": per_cat,
            "format_version": self.format_version,
        }

    # -- retrieval --------------------------------------------------------

    def preprocess_query(self, q) -> ProcessedQuery:
        vec = as_embedding(q, self.dim)
        scale = float(np.linalg.norm(vec)) + float(np.linalg.norm(self.global_mean))
        unit, degenerate = _unit(vec - self.global_mean, scale)
        return ProcessedQuery(unit, degenerate)

    def _best(self, scores: np.ndarray) -> Match:
        scores = np.where(self.degenerate, -np.inf, scores)
        best = float(scores.max())
        if best == -np.inf:
            return Match.no_match()
        # first row within tolerance of the max == lexicographically smallest label
        i = int(np.flatnonzero(scores >= best - _TIE_ATOL)[0])
        sim = min(1.0, max(-1.0, float(scores[i])))
        return Match(self.labels[i], self.categories[i], sim)

    def search(self, q) -> Match:
        """Return the nearest non-degenerate centroid by cosine similarity."""
        pq = self.preprocess_query(q)
        if pq.degenerate:
            return Match.no_match()
        return self._best(self.processed @ pq.vector)

    def search_batch(self, queries) -> list[Match]:
        return [self.search(q) for q in np.atleast_2d(np.asarray(queries, dtype=np.float64))]

    # -- persistence ------------------------------------------------------

    def quantized(self) -> "CentroidIndex":
        """This index with every vector rounded to float32, as stored on disk."""
        f32 = lambda a: np.asarray(a, dtype=np.float32).astype(np.float64)  # noqa: E731
        return CentroidIndex(
            self.labels, self.categories, f32(self.raw), self.sample_counts,
            self.degenerate, f32(self.processed), f32(self.global_mean), self.format_version,
        )

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(_HEADER.pack(MAGIC, self.format_version, self.dim, len(self)))
        buf.write(self.global_mean.astype("<f4").tobytes())
        for i, label in enumerate(self.labels):
            encoded = label.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise ValueError(f"label too long for index format: {label[:40]!r}...")
            buf.write(struct.pack("<H", len(encoded)))
            buf.write(encoded)
            buf.write(struct.pack("<BIB", _CATEGORY_CODES[self.categories[i]],
                                  self.sample_counts[i], int(self.degenerate[i])))
            buf.write(self.raw[i].astype("<f4").tobytes())
            buf.write(self.processed[i].astype("<f4").tobytes())
        payload = buf.getvalue()
        return payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)

    @classmethod
    def from_bytes(cls, data: bytes) -> "CentroidIndex":
        return _decode(memoryview(data))

    def save(self, sink: str | os.PathLike | BinaryIO) -> None:
        data = self.to_bytes()
        if hasattr(sink, "write"):
            sink.write(data)
            return
        path = Path(sink)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(data)
        os.replace(tmp, path)

    @classmethod
    def load(cls, source: str | os.PathLike | BinaryIO) -> "CentroidIndex":
        data = source.read() if hasattr(source, "read") else Path(source).read_bytes()
        return cls.from_bytes(data)


class _Reader:
    def __init__(self, data: memoryview):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> memoryview:
        end = self.pos + n
        # the last 4 bytes are reserved for the checksum
        if end > len(self.data) - 4:
            raise TruncatedIndexError(f"index file truncated while reading {what}")
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))

    def vector(self, dim: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(4 * dim, what), dtype="<f4").astype(np.float64)


def _decode(data: memoryview) -> CentroidIndex:
    if len(data) < 4 and MAGIC.startswith(bytes(data)):
        raise TruncatedIndexError("index file truncated in header")
    if bytes(data[:4]) != MAGIC:
        raise BadMagicError("not a centroid index file (bad magic bytes)")
    if len(data) < _HEADER.size + 4:
        raise TruncatedIndexError("index file truncated in header")
    r = _Reader(data)
    _, version, dim, count = r.unpack(_HEADER.format, "header")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported index format version {version}")
    if dim == 0:
        raise IndexFormatError("index dimension is zero")
    if count == 0:
        raise IndexFormatError("index has no classes")
    global_mean = r.vector(dim, "global mean")
    labels, cats, counts, flags, raws, procs = [], [], [], [], [], []
    for k in range(count):
        (n,) = r.unpack("<H", f"label length of class {k}")
        try:
            labels.append(bytes(r.take(n, f"label of class {k}")).decode("utf-8"))
        except UnicodeDecodeError:
            raise IndexFormatError(f"label of class {k} is not valid UTF-8") from None
        code, sample_count, flag = r.unpack("<BIB", f"metadata of class {k}")
        if code not in _CODE_CATEGORIES or flag not in (0, 1):
            raise IndexFormatError(f"bad category/flag byte in class {k}")
        cats.append(_CODE_CATEGORIES[code])
        counts.append(sample_count)
        flags.append(bool(flag))
        raws.append(r.vector(dim, f"raw centroid of class {k}"))
        procs.append(r.vector(dim, f"processed centroid of class {k}"))
    if r.pos != len(data) - 4:
        raise IndexFormatError(f"{len(data) - 4 - r.pos} unexpected trailing bytes")
    (stored_crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored_crc:
        raise ChecksumError("index checksum mismatch")
    if labels != sorted(labels) or len(set(labels)) != len(labels):
        raise IndexFormatError("labels are not unique and sorted")
    return CentroidIndex(labels, cats, np.stack(raws), counts, flags, np.stack(procs), global_mean, version)


def read_build_jsonl(path: str | os.PathLike) -> Iterator[LabeledEmbedding]:
    """Yield build records from a JSONL file of ``{"label", "category", "embedding"}``."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield LabeledEmbedding.from_json(json.loads(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise ManifestError(str(exc) or type(exc).__name__, line=lineno, path=str(path)) from exc


def build_index(samples: Iterable[LabeledEmbedding]) -> CentroidIndex:
    return IndexBuilder().extend(samples).finalize()
