"""Hybrid object recognition: a multimodal chat model routes and names
objects, a class-centroid index refines animals and plants to species."""

from .errors import HybridRecError, RouterError
from .evaluate import calibrate_threshold, exact_match, judge_score, routing_accuracy, run_eval
from .gateway import ChatClient, CoarsePrediction, EmbeddingClient, EndpointConfig, Gateway, ImagePayload, Rating
from .index import CentroidIndex, IndexBuilder, LabeledEmbedding, Match
from .router import Decision, RecognitionResult, Router, RouterConfig, decide, recognize
from .types import Category, Granularity

__version__ = "0.1.0"

__all__ = [
    "CentroidIndex", "Category", "ChatClient", "CoarsePrediction", "Decision", "EmbeddingClient",
    "EndpointConfig", "Gateway", "Granularity", "HybridRecError", "ImagePayload", "IndexBuilder",
    "LabeledEmbedding", "Match", "Rating", "RecognitionResult", "Router", "RouterConfig", "RouterError",
    "calibrate_threshold", "decide", "exact_match", "judge_score", "recognize", "routing_accuracy", "run_eval",
]
