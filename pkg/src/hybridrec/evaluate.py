"""Evaluation protocol: exact match, embedding similarity, judge score,
routing accuracy, per-dataset aggregation and threshold calibration.

All means use ``math.fsum`` so reports do not depend on the order outcomes
finish in; a resumed run and an uninterrupted run serialize identically.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
import threading
import unicodedata
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .errors import HybridRecError, ManifestError, ResponseParseError
from .gateway import ImagePayload, Rating
from .index import Match
from .manifests import DatasetManifest, EvalSample, resolve_image
from .router import Decision, RecognitionResult, RoutingTrace, decide
from .types import SPECIALIZED, Category

log = logging.getLogger(__name__)

METRICS = ("em", "sbert", "llm", "routing")

JUDGE_SCORES = {Rating.A: 1.0, Rating.B: 0.8, Rating.C: 0.0}


# --- per-pair metrics ------------------------------------------------------

_WS = re.compile(r"\s+")


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def canonicalize(text: str) -> str:
    """NFC, lowercase, collapse whitespace, strip surrounding whitespace and punctuation."""
    s = _WS.sub(" ", unicodedata.normalize("NFC", text).lower()).strip()
    start, end = 0, len(s)
    while start < end and (_is_punct(s[start]) or s[start].isspace()):
        start += 1
    while end > start and (_is_punct(s[end - 1]) or s[end - 1].isspace()):
        end -= 1
    return s[start:end]


def exact_match(prediction: str, ground_truth: str) -> bool:
    return canonicalize(prediction) == canonicalize(ground_truth)


def judge_score(rating: Rating | str) -> float:
    return JUDGE_SCORES[Rating(rating)]


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return max(-1.0, min(1.0, float(np.dot(a, b)) / (na * nb)))


class TextEmbedder(Protocol):
    def embed_text(self, text: str) -> np.ndarray: ...


class SimilarityScorer:
    """Cosine similarity of text embeddings, caching one embedding per distinct string."""

    def __init__(self, embedder: TextEmbedder):
        self.embedder = embedder
        self._cache: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def embedding(self, text: str) -> np.ndarray:
        with self._lock:
            hit = self._cache.get(text)
        if hit is not None:
            return hit
        vec = np.asarray(self.embedder.embed_text(text), dtype=np.float64)
        with self._lock:
            return self._cache.setdefault(text, vec)

    def __call__(self, prediction: str, ground_truth: str) -> float:
        return cosine(self.embedding(prediction), self.embedding(ground_truth))


def semantic_similarity(embedder: TextEmbedder, prediction: str, ground_truth: str) -> float:
    return SimilarityScorer(embedder)(prediction, ground_truth)


@dataclass(frozen=True)
class RoutingAccuracy:
    specialized: float | None
    general: float | None
    specialized_n: int
    general_n: int

    def to_json(self) -> dict:
        return {"specialized": self.specialized, "general": self.general,
                "specialized_n": self.specialized_n, "general_n": self.general_n}


def routing_accuracy(pairs: Iterable[tuple[Category, Category]]) -> RoutingAccuracy:
    """Percent of (ground-truth category, routed category) pairs sent to the right branch.

    A group with no samples is reported as None (not applicable).
    """
    spec_n = spec_ok = gen_n = gen_ok = 0
    for gt, routed in pairs:
        gt, routed = Category.parse(gt), Category.parse(routed)
        if gt in SPECIALIZED:
            spec_n += 1
            spec_ok += routed in SPECIALIZED
        else:
            gen_n += 1
            gen_ok += routed is Category.OTHER
    return RoutingAccuracy(
        spec_ok / spec_n * 100 if spec_n else None,
        gen_ok / gen_n * 100 if gen_n else None,
        spec_n,
        gen_n,
    )


# --- predictions and outcomes ----------------------------------------------

@dataclass(frozen=True)
class Prediction:
    label: str
    granularity: str
    category: Category
    similarity: float | None = None
    trace: RoutingTrace | None = None

    @classmethod
    def from_result(cls, result: RecognitionResult) -> "Prediction":
        return cls(result.label, result.granularity.value, result.category, result.similarity, result.trace)

    @classmethod
    def from_json(cls, obj: dict) -> "Prediction":
        trace = obj.get("trace")
        return cls(
            obj["label"],
            obj.get("granularity", "coarse"),
            Category.parse(obj.get("category", "other")),
            obj.get("similarity"),
            RoutingTrace.from_json(trace) if trace else None,
        )

    def to_json(self) -> dict:
        out = {"label": self.label, "granularity": self.granularity,
               "category": self.category.value, "similarity": self.similarity}
        if self.trace is not None:
            out["trace"] = self.trace.to_json()
        return out


def load_predictions(path: str | os.PathLike) -> dict[str, Prediction]:
    """Read a predictions JSONL keyed by its ``image`` field."""
    preds: dict[str, Prediction] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                image = obj["image"]
                pred = Prediction.from_json(obj)
                if not isinstance(pred.label, str):
                    raise ValueError("'label' must be a string")
            except (ValueError, KeyError, TypeError) as exc:
                raise ManifestError(str(exc), line=lineno, path=str(path)) from exc
            if image in preds:
                raise ManifestError(f"duplicate prediction for {image!r}", line=lineno, path=str(path))
            preds[image] = pred
    return preds


@dataclass(frozen=True)
class EvalOutcome:
    sample: EvalSample
    prediction: Prediction | None
    em: bool | None = None
    sbert_sim: float | None = None
    judge: Rating | None = None
    judge_error: str | None = None
    error: str | None = None

    @property
    def judge_score(self) -> float | None:
        return None if self.judge is None else JUDGE_SCORES[self.judge]

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_json(self) -> dict:
        return {
            "key": self.sample.key,
            "sample": self.sample.to_json(),
            "prediction": self.prediction.to_json() if self.prediction else None,
            "em": self.em,
            "sbert_sim": self.sbert_sim,
            "judge": self.judge.value if self.judge else None,
            "judge_score": self.judge_score,
            "judge_error": self.judge_error,
            "error": self.error,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EvalOutcome":
        s = obj["sample"]
        sample = EvalSample(s["image"], s["label"], Category.parse(s["category"]), s["dataset"], s["split"])
        pred = obj.get("prediction")
        return cls(
            sample,
            Prediction.from_json(pred) if pred else None,
            obj.get("em"),
            obj.get("sbert_sim"),
            Rating(obj["judge"]) if obj.get("judge") else None,
            obj.get("judge_error"),
            obj.get("error"),
        )


def read_outcomes(path: str | os.PathLike) -> dict[str, EvalOutcome]:
    """Outcomes from a per-sample JSONL; later lines for a key win; a torn last line is ignored."""
    out: dict[str, EvalOutcome] = {}
    p = Path(path)
    if not p.exists():
        return out
    with p.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                o = EvalOutcome.from_json(json.loads(line))
            except (ValueError, KeyError, TypeError):
                log.warning("%s:%d: skipping unreadable outcome line", path, lineno)
                continue
            out[o.sample.key] = o
    return out


# --- reports ---------------------------------------------------------------

def _pct(values: Sequence[float]) -> float | None:
    return math.fsum(values) / len(values) * 100 if values else None


def _mean(values: Sequence[float]) -> float | None:
    return math.fsum(values) / len(values) if values else None


@dataclass
class DatasetReport:
    dataset: str
    samples: int
    excluded: int
    em: float | None = None
    sbert: float | None = None
    llm: float | None = None
    llm_excluded: int = 0
    routing_specialized: float | None = None
    routing_general: float | None = None

    def to_json(self) -> dict:
        return dict(self.__dict__)


_AVG_FIELDS = ("em", "sbert", "llm", "routing_specialized", "routing_general")


@dataclass
class EvalReport:
    metrics: tuple[str, ...]
    datasets: list[DatasetReport]
    average: dict[str, float | None]
    averaging: str = "macro"

    def to_json(self) -> dict:
        return {
            "metrics": list(self.metrics),
            "averaging": self.averaging,
            "datasets": [d.to_json() for d in self.datasets],
            "average": self.average,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n"

    def render(self) -> str:
        cols = [("EM", "em"), ("SBert", "sbert"), ("LLM", "llm"),
                ("Route-S", "routing_specialized"), ("Route-G", "routing_general")]
        w = max([len("Avg."), len("Dataset")] + [len(d.dataset) for d in self.datasets])
        fmt = lambda v: "    -" if v is None else f"{v:5.1f}"  # noqa: E731
        head = f"{'Dataset':>{w}} | {'N':>6} | " + " | ".join(f"{c:>7}" for c, _ in cols) + " | Excl."
        lines = [head, "-" * len(head)]
        for d in self.datasets:
            vals = " | ".join(f"{fmt(getattr(d, k)):>7}" for _, k in cols)
            lines.append(f"{d.dataset:>{w}} | {d.samples:>6} | {vals} | {d.excluded:>5}")
        vals = " | ".join(f"{fmt(self.average.get(k)):>7}" for _, k in cols)
        lines.append(f"{'Avg.':>{w}} | {'':>6} | {vals} |")
        return "\n".join(lines)


def aggregate(outcomes: Iterable[EvalOutcome], metrics: Sequence[str] = METRICS,
              averaging: str = "macro") -> EvalReport:
    """Build a report from outcomes; ``averaging`` is ``"macro"`` (over datasets) or ``"micro"``."""
    if averaging not in ("macro", "micro"):
        raise ValueError("averaging must be 'macro' or 'micro'")
    ordered = sorted(outcomes, key=lambda o: o.sample.key)
    groups: dict[str, list[EvalOutcome]] = {}
    for o in ordered:
        groups.setdefault(o.sample.dataset, []).append(o)

    def summarize(name: str, items: list[EvalOutcome]) -> DatasetReport:
        good = [o for o in items if o.ok]
        row = DatasetReport(name, len(items), len(items) - len(good))
        if "em" in metrics:
            row.em = _pct([float(o.em) for o in good if o.em is not None])
        if "sbert" in metrics:
            row.sbert = _pct([o.sbert_sim for o in good if o.sbert_sim is not None])
        if "llm" in metrics:
            row.llm = _pct([o.judge_score for o in good if o.judge is not None])
            row.llm_excluded = sum(1 for o in good if o.judge is None)
        if "routing" in metrics:
            ra = routing_accuracy((o.sample.gt_category, o.prediction.category) for o in good)
            row.routing_specialized, row.routing_general = ra.specialized, ra.general
        return row

    rows = [summarize(name, items) for name, items in groups.items()]
    if averaging == "micro":
        pooled = summarize("all", ordered)
        average = {k: getattr(pooled, k) for k in _AVG_FIELDS}
    else:
        average = {}
        for k in _AVG_FIELDS:
            vals = [getattr(r, k) for r in rows if getattr(r, k) is not None]
            average[k] = _mean(vals)
    return EvalReport(tuple(m for m in METRICS if m in metrics), rows, average, averaging)


# --- running an evaluation -------------------------------------------------

class Judge(Protocol):
    def judge_pair(self, prediction: str, ground_truth: str) -> Rating: ...


@dataclass
class EvalRunner:
    """Evaluates manifest samples against a live router or a predictions file.

    With ``out_path`` set, every outcome is appended to that JSONL as it
    completes and already-successful samples are skipped on the next run.
    """

    metrics: Sequence[str] = ("em",)
    router: object | None = None
    predictions: Mapping[str, Prediction] | None = None
    text_embedder: TextEmbedder | None = None
    judge: Judge | None = None
    concurrency: int = 4
    load_image: Callable[[str], ImagePayload] = ImagePayload.from_path
    _scorer: SimilarityScorer | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        unknown = set(self.metrics) - set(METRICS)
        if unknown:
            raise ValueError(f"unknown metrics: {sorted(unknown)}")
        if (self.router is None) == (self.predictions is None):
            raise ValueError("provide exactly one of router or predictions")
        if "sbert" in self.metrics:
            if self.text_embedder is None:
                raise ValueError("sbert metric needs a text embedder")
            self._scorer = SimilarityScorer(self.text_embedder)
        if "llm" in self.metrics and self.judge is None:
            raise ValueError("llm metric needs a judge")
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")

    def predict(self, manifest: DatasetManifest, sample: EvalSample) -> Prediction:
        if self.predictions is not None:
            try:
                return self.predictions[sample.image_ref]
            except KeyError:
                raise LookupError(f"no prediction for {sample.image_ref!r}") from None
        image = self.load_image(resolve_image(manifest, sample.image_ref))
        return Prediction.from_result(self.router.recognize(image))

    def evaluate(self, manifest: DatasetManifest, sample: EvalSample) -> EvalOutcome:
        try:
            pred = self.predict(manifest, sample)
            em = exact_match(pred.label, sample.ground_truth) if "em" in self.metrics else None
            sim = self._scorer(pred.label, sample.ground_truth) if self._scorer else None
        except (HybridRecError, OSError, LookupError, ValueError) as exc:
            return EvalOutcome(sample, None, error=f"{type(exc).__name__}: {exc}")
        rating, judge_error = None, None
        if "llm" in self.metrics:
            try:
                if not pred.label.strip():
                    raise ResponseParseError("empty prediction")
                rating = self.judge.judge_pair(pred.label, sample.ground_truth)
            except (HybridRecError, ValueError) as exc:
                judge_error = f"{type(exc).__name__}: {exc}"
        return EvalOutcome(sample, pred, em, sim, rating, judge_error)

    def run(
        self,
        manifest: DatasetManifest,
        out_path: str | os.PathLike | None = None,
        stop_after: int | None = None,
        averaging: str = "macro",
    ) -> tuple[EvalReport, list[EvalOutcome]]:
        """Evaluate pending samples and aggregate everything done so far.

        ``stop_after`` bounds how many pending samples this call processes,
        which is how an interrupted run is reproduced in tests.
        """
        keys = {s.key for s in manifest.samples}
        done = {k: o for k, o in read_outcomes(out_path).items() if k in keys and o.ok} if out_path else {}
        pending = [s for s in manifest.samples if s.key not in done]
        if stop_after is not None:
            pending = pending[:stop_after]
        log.info("evaluating %d samples (%d already done)", len(pending), len(done))
        fresh: dict[str, EvalOutcome] = {}
        sink = open(out_path, "a", encoding="utf-8") if out_path else None
        try:
            with ThreadPoolExecutor(max_workers=self.concurrency) as pool:
                futures = [pool.submit(self.evaluate, manifest, s) for s in pending]
                for fut in as_completed(futures):
                    o = fut.result()
                    fresh[o.sample.key] = o
                    if sink:
                        sink.write(json.dumps(o.to_json(), sort_keys=True, ensure_ascii=False) + "\n")
                        sink.flush()
        finally:
            if sink:
                sink.close()
        outcomes = list({**done, **fresh}.values())
        return aggregate(outcomes, self.metrics, averaging), outcomes


def run_eval(manifest: DatasetManifest, *, out_path=None, stop_after=None,
             averaging: str = "macro", **runner_kwargs) -> EvalReport:
    runner = EvalRunner(**runner_kwargs)
    return runner.run(manifest, out_path, stop_after, averaging)[0]


# --- threshold calibration -------------------------------------------------

@dataclass(frozen=True)
class CalibrationSample:
    ground_truth: str
    category: Category
    coarse_label: str
    match: Match | None

    @classmethod
    def from_outcome(cls, o: EvalOutcome) -> "CalibrationSample":
        if o.prediction is None or o.prediction.trace is None:
            raise ValueError(f"outcome {o.sample.key!r} has no routing trace")
        t = o.prediction.trace
        return cls(o.sample.ground_truth, t.coarse.category, t.coarse.name, t.retrieval)


@dataclass(frozen=True)
class CalibrationResult:
    threshold: float
    curve: tuple[tuple[float, float], ...]
    objective: str

    @property
    def best_score(self) -> float:
        return max(s for _, s in self.curve)

    def to_json(self) -> dict:
        return {"threshold": self.threshold, "objective": self.objective, "best_score": self.best_score,
                "curve": [[t, s] for t, s in self.curve]}


def default_grid(points: int = 101) -> np.ndarray:
    return np.linspace(0.0, 1.0, points)


def calibrate_threshold(
    samples: Sequence[CalibrationSample],
    grid: Sequence[float] | None = None,
    metric: Callable[[str, str], float] = exact_match,
    objective: str = "em",
) -> CalibrationResult:
    """Pick the threshold that maximizes the mean of ``metric`` over ``samples``.

    Each grid value replays the routing decision for every sample.  Ties go
    to the smallest threshold.
    """
    if not samples:
        raise ValueError("calibration needs at least one sample")
    grid = default_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    # each sample can only end up with one of two labels
    fine_score, coarse_score = [], []
    for s in samples:
        coarse_score.append(float(metric(s.coarse_label, s.ground_truth)))
        usable = s.match is not None and not s.match.degenerate
        fine_score.append(float(metric(s.match.label, s.ground_truth)) if usable else None)
    curve = []
    for tau in grid:
        tau = float(tau)
        scores = [
            fine_score[i] if decide(s.category, s.match, tau) is Decision.FINE_ADOPTED else coarse_score[i]
            for i, s in enumerate(samples)
        ]
        curve.append((tau, math.fsum(scores) / len(scores)))
    best = max(score for _, score in curve)
    tau_star = next(t for t, score in curve if score == best)
    return CalibrationResult(tau_star, tuple(curve), objective)
