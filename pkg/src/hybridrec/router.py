"""Coarse-to-fine recognition pipeline.

The chat model names the object and picks a category.  ``other`` objects
keep the chat model's name.  Animals and plants are embedded and looked up
in the centroid index; the retrieved species label replaces the coarse name
only when its similarity reaches the threshold.

Routing table implemented by :func:`decide` (specialized = animal or plant)::

    category     retrieval              decision
    other        (anything)             direct_coarse
    specialized  none (not run/failed)  fallback_degenerate
    specialized  degenerate match       fallback_degenerate
    specialized  similarity <  tau      fallback_below_threshold
    specialized  similarity >= tau      fine_adopted
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Protocol

import numpy as np

from .errors import GatewayError, HybridRecError, RouterError
from .gateway import CoarsePrediction, ImagePayload
from .index import CentroidIndex, Match
from .types import SPECIALIZED, Category, Granularity

log = logging.getLogger(__name__)


class Decision(str, Enum):
    DIRECT_COARSE = "direct_coarse"
    FINE_ADOPTED = "fine_adopted"
    FALLBACK_BELOW_THRESHOLD = "fallback_below_threshold"
    FALLBACK_DEGENERATE = "fallback_degenerate"


class Source(str, Enum):
    MLLM = "mllm"
    CENTROID_RETRIEVAL = "centroid_retrieval"


class RecognitionGateway(Protocol):
    def classify_coarse(self, image: ImagePayload) -> CoarsePrediction: ...

    def embed_image(self, image: ImagePayload) -> np.ndarray: ...


@dataclass(frozen=True)
class RouterConfig:
    threshold: float
    specialized_categories: frozenset[Category] = SPECIALIZED
    index_path: str | None = None
    degrade_on_retrieval_error: bool = True

    def __post_init__(self):
        t = self.threshold
        if t is None or not isinstance(t, (int, float)) or math.isnan(t):
            raise ValueError("threshold is required and must be a number")
        if not -1.0 <= t <= 1.0:
            raise ValueError(f"threshold must lie in [-1, 1], got {t}")
        cats = frozenset(Category.parse(c) for c in self.specialized_categories)
        if Category.OTHER in cats:
            raise ValueError("'other' cannot be a specialized category")
        object.__setattr__(self, "specialized_categories", cats)


def decide(
    category: Category,
    match: Match | None,
    threshold: float,
    specialized: frozenset[Category] = SPECIALIZED,
) -> Decision:
    """Pure routing kernel; see the module docstring for the full table."""
    if Category.parse(category) not in specialized:
        return Decision.DIRECT_COARSE
    if match is None or match.degenerate:
        return Decision.FALLBACK_DEGENERATE
    if match.similarity >= threshold:
        return Decision.FINE_ADOPTED
    return Decision.FALLBACK_BELOW_THRESHOLD


@dataclass(frozen=True)
class RoutingTrace:
    coarse: CoarsePrediction
    retrieval: Match | None
    decision: Decision
    timings_ms: dict[str, float] = field(default_factory=dict)
    degraded: bool = False
    error: str | None = None

    def to_json(self, max_raw: int | None = 500) -> dict:
        return {
            "coarse": self.coarse.to_json(max_raw),
            "retrieval": self.retrieval.to_json() if self.retrieval else None,
            "decision": self.decision.value,
            "timings_ms": {k: round(v, 3) for k, v in self.timings_ms.items()},
            "degraded": self.degraded,
            "error": self.error,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RoutingTrace":
        return cls(
            CoarsePrediction.from_json(obj["coarse"]),
            Match.from_json(obj.get("retrieval")),
            Decision(obj["decision"]),
            dict(obj.get("timings_ms", {})),
            bool(obj.get("degraded", False)),
            obj.get("error"),
        )


@dataclass(frozen=True)
class RecognitionResult:
    label: str
    granularity: Granularity
    source: Source
    category: Category
    # set whenever a usable (non-degenerate) retrieval ran
    similarity: float | None
    trace: RoutingTrace

    def to_json(self, include_trace: bool = True, max_raw: int | None = 500) -> dict:
        out = {
            "label": self.label,
            "granularity": self.granularity.value,
            "source": self.source.value,
            "category": self.category.value,
            "similarity": self.similarity,
        }
        if include_trace:
            out["trace"] = self.trace.to_json(max_raw)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "RecognitionResult":
        return cls(
            obj["label"],
            Granularity(obj["granularity"]),
            Source(obj["source"]),
            Category.parse(obj["category"]),
            obj.get("similarity"),
            RoutingTrace.from_json(obj["trace"]),
        )


def assemble(coarse: CoarsePrediction, match: Match | None, decision: Decision,
             timings: dict[str, float] | None = None, degraded: bool = False,
             error: str | None = None) -> RecognitionResult:
    trace = RoutingTrace(coarse, match, decision, dict(timings or {}), degraded, error)
    usable = match is not None and not match.degenerate
    if decision is Decision.FINE_ADOPTED:
        return RecognitionResult(match.label, Granularity.FINE, Source.CENTROID_RETRIEVAL,
                                 coarse.category, match.similarity, trace)
    return RecognitionResult(coarse.name, Granularity.COARSE, Source.MLLM, coarse.category,
                             match.similarity if usable else None, trace)


def check_consistency(result: RecognitionResult, threshold: float) -> None:
    """Raise AssertionError if ``result`` and its trace disagree."""
    fine = result.granularity is Granularity.FINE
    assert fine == (result.source is Source.CENTROID_RETRIEVAL)
    assert fine == (result.similarity is not None and result.similarity >= threshold)
    if result.category is Category.OTHER:
        assert result.similarity is None
    d = result.trace.decision
    assert fine == (d is Decision.FINE_ADOPTED)
    if d is Decision.DIRECT_COARSE:
        assert result.trace.retrieval is None and result.label == result.trace.coarse.name
    if d is Decision.FINE_ADOPTED:
        assert result.label == result.trace.retrieval.label
    if d is Decision.FALLBACK_BELOW_THRESHOLD:
        assert result.similarity is not None and result.similarity < threshold
    if d is Decision.FALLBACK_DEGENERATE:
        r = result.trace.retrieval
        assert r is None or r.degenerate


def recognize(
    cfg: RouterConfig,
    index: CentroidIndex,
    gateway: RecognitionGateway,
    image: ImagePayload,
) -> RecognitionResult:
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    try:
        coarse = gateway.classify_coarse(image)
    except (GatewayError, OSError) as exc:
        raise RouterError("coarse", exc) from exc
    timings["coarse"] = (time.perf_counter() - t0) * 1000

    if coarse.category not in cfg.specialized_categories:
        return assemble(coarse, None, Decision.DIRECT_COARSE, timings)

    t1 = time.perf_counter()
    try:
        vec = gateway.embed_image(image)
        timings["embed"] = (time.perf_counter() - t1) * 1000
        t2 = time.perf_counter()
        match = index.search(vec)
        timings["search"] = (time.perf_counter() - t2) * 1000
    except (HybridRecError, OSError) as exc:
        stage = "search" if "embed" in timings else "embed"
        if not cfg.degrade_on_retrieval_error:
            raise RouterError(stage, exc) from exc
        log.warning("retrieval failed at %s stage, keeping coarse label: %s", stage, exc)
        return assemble(coarse, None, Decision.FALLBACK_DEGENERATE, timings,
                        degraded=True, error=f"{stage}: {exc}")

    decision = decide(coarse.category, match, cfg.threshold, cfg.specialized_categories)
    return assemble(coarse, match, decision, timings)


class Router:
    """A configured pipeline.  Holds an immutable index that can be swapped atomically."""

    def __init__(self, cfg: RouterConfig, index: CentroidIndex, gateway: RecognitionGateway):
        self.cfg = cfg
        self.index = index
        self.gateway = gateway

    def recognize(self, image: ImagePayload) -> RecognitionResult:
        # read the reference once so a concurrent swap cannot mix two indexes
        index = self.index
        return recognize(self.cfg, index, self.gateway, image)

    def swap_index(self, index: CentroidIndex) -> CentroidIndex:
        old, self.index = self.index, index
        return old
