"""HTTP clients for the remote models.

Three kinds of endpoint are used:

* a multimodal chat model speaking the OpenAI chat-completions protocol; it
  names the main object in an image and routes it (animal / plant / other),
  and a text-only chat model of the same kind serves as the evaluation judge;
* an image-embedding model, ``{"input": {...image...}} -> {"embedding": [...]}``;
* a text-embedding model, ``{"input": "text"} -> {"embedding": [...]}``.

Clients hold no per-request state and can be shared between threads.  The
number of in-flight requests per client is capped by ``max_concurrency``.
"""

from __future__ import annotations

import base64
import binascii
import json
import logging
import mimetypes
import string
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Sequence

import httpx
import numpy as np

from .errors import (
    GatewayError,
    InvalidEmbeddingError,
    ResponseParseError,
    TransportError,
)
from .index import as_embedding
from .types import Category

log = logging.getLogger(__name__)

COARSE_PROMPT = (
    "Identify the main object in the image. Output the category and the name of the main "
    'object in the image in JSON format with the keys "category" and "name". The category '
    'can only be one of "plant", "animal" or "other".\n'
    "\n"
    "Example output:\n"
    "\n"
    '{"category": "animal", "name": "Dog"}\n'
    "\n"
    "Now generate the output for the given image."
)

JUDGE_TEMPLATE = (
    "Given two English nouns, prediction and label, determine their semantic relationship. "
    "Output A if they are synonyms (i.e., they refer to the same concept). Output B if either "
    "prediction is a hypernym of label, or label is a hypernym of prediction. Output C if "
    "neither of the above applies. Respond with a single uppercase letter: A, B, or C.\n"
    "\n"
    "Examples:\n"
    "\n"
    "prediction = car, label = automobile → Output: A;\n"
    "\n"
    "prediction = vegetable, label = bokchoy → Output: B;\n"
    "\n"
    "prediction = bokchoy, label = vegetable → Output: B;\n"
    "\n"
    "prediction = airplane, label = football → Output: C.\n"
    "\n"
    "Now evaluate: prediction = {PRED}, label = {GT}"
)

# JSON schema handed to servers that support constrained decoding
COARSE_SCHEMA = {
    "type": "object",
    "properties": {
        "category": {"type": "string", "enum": ["plant", "animal", "other"]},
        "name": {"type": "string"},
    },
    "required": ["category", "name"],
    "additionalProperties": False,
}

_RETRYABLE_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}


class Rating(str, Enum):
    A = "A"  # synonyms
    B = "B"  # hypernym in either direction
    C = "C"  # unrelated


@dataclass(frozen=True)
class ImagePayload:
    data: bytes
    media_type: str = "image/jpeg"

    def __post_init__(self):
        if not self.data:
            raise ValueError("image payload is empty")

    @classmethod
    def from_path(cls, path: str | Path) -> "ImagePayload":
        media_type = mimetypes.guess_type(str(path))[0] or "application/octet-stream"
        return cls(Path(path).read_bytes(), media_type)

    @classmethod
    def from_b64(cls, encoded: str, media_type: str = "image/jpeg") -> "ImagePayload":
        try:
            data = base64.b64decode(encoded, validate=True)
        except (binascii.Error, ValueError) as exc:
            raise ValueError(f"invalid base64 image: {exc}") from None
        return cls(data, media_type)

    def b64(self) -> str:
        return base64.b64encode(self.data).decode("ascii")

    def data_url(self) -> str:
        return f"data:{self.media_type};base64,{self.b64()}"


@dataclass(frozen=True)
class CoarsePrediction:
    category: Category
    name: str
    raw_response: str
    warnings: tuple[str, ...] = ()

    def to_json(self, max_raw: int | None = None) -> dict:
        raw = self.raw_response
        if max_raw is not None and len(raw) > max_raw:
            raw = raw[:max_raw] + "..."
        return {
            "category": self.category.value,
            "name": self.name,
            "raw_response": raw,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CoarsePrediction":
        return cls(Category.parse(obj["category"]), obj["name"], obj.get("raw_response", ""),
                   tuple(obj.get("warnings", ())))


@dataclass
class EndpointConfig:
    base_url: str
    model_id: str = ""
    timeout: float = 30.0
    max_retries: int = 2
    auth_token: str | None = field(default=None, repr=False)
    # appended to base_url; chat clients default to /chat/completions
    path: str | None = None
    backoff_base: float = 0.5
    backoff_cap: float = 8.0
    max_concurrency: int = 8
    # pass-through sampling parameters (temperature, top_p, seed, ...)
    params: dict[str, Any] = field(default_factory=dict)
    guided_decoding: bool = True

    def __post_init__(self):
        if not self.base_url:
            raise ValueError("base_url is required")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")

    def url(self, default_path: str = "") -> str:
        path = self.path if self.path is not None else default_path
        return self.base_url.rstrip("/") + path


# --- parsing ---------------------------------------------------------------

_decoder = json.JSONDecoder()


def iter_json_objects(text: str):
    """Yield every JSON object that can be decoded starting at a ``{`` in ``text``."""
    pos = text.find("{")
    while pos != -1:
        try:
            obj, _ = _decoder.raw_decode(text, pos)
        except json.JSONDecodeError:
            obj = None
        if isinstance(obj, dict):
            yield obj
        pos = text.find("{", pos + 1)


def parse_coarse(text: str) -> CoarsePrediction:
    """Parse a chat reply into a CoarsePrediction.

    The first JSON object carrying both ``category`` and ``name`` (keys matched
    case-insensitively) wins, so markdown fences and surrounding prose are
    tolerated.  Categories outside animal/plant/other become ``other`` with a
    warning.  Anything else raises ResponseParseError.
    """
    if not isinstance(text, str):
        raise ResponseParseError("response is not text", raw=repr(text))
    seen_object = False
    for obj in iter_json_objects(text):
        seen_object = True
        keys = {str(k).strip().lower(): v for k, v in obj.items()}
        if "category" not in keys or "name" not in keys:
            continue
        category, name = keys["category"], keys["name"]
        if not isinstance(name, str) or not name.strip():
            raise ResponseParseError("'name' must be a non-empty string", raw=text)
        if not isinstance(category, str):
            raise ResponseParseError("'category' must be a string", raw=text)
        warnings = ()
        try:
            cat = Category.parse(category)
        except ValueError:
            msg = f"category {category!r} outside animal/plant/other; treated as other"
            log.warning(msg)
            cat, warnings = Category.OTHER, (msg,)
        return CoarsePrediction(cat, name.strip(), text, warnings)
    if seen_object:
        raise ResponseParseError("no JSON object with 'category' and 'name' keys", raw=text)
    raise ResponseParseError("no JSON object in response", raw=text)


_PUNCT = string.punctuation + "“”‘’«»"


def parse_rating(text: str) -> Rating:
    """Return the first whitespace token that is exactly A, B or C once punctuation is stripped."""
    for token in (text or "").split():
        token = token.strip(_PUNCT)
        if token in ("A", "B", "C"):
            return Rating(token)
    raise ResponseParseError("no A/B/C rating in judge reply", raw=text)


def render_judge_prompt(prediction: str, ground_truth: str) -> str:
    return JUDGE_TEMPLATE.replace("{PRED}", prediction).replace("{GT}", ground_truth)


def coarse_messages(image: ImagePayload) -> list[dict]:
    return [{
        "role": "user",
        "content": [
            {"type": "image_url", "image_url": {"url": image.data_url()}},
            {"type": "text", "text": COARSE_PROMPT},
        ],
    }]


def _elide_images(body: Any) -> Any:
    if isinstance(body, dict):
        out = {}
        for k, v in body.items():
            if isinstance(v, str) and (k in ("image_b64", "url") and len(v) > 64):
                out[k] = f"<{len(v)} chars elided>"
            else:
                out[k] = _elide_images(v)
        return out
    if isinstance(body, list):
        return [_elide_images(v) for v in body]
    return body


# --- transport -------------------------------------------------------------

class _Endpoint:
    default_path = ""

    def __init__(
        self,
        cfg: EndpointConfig,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.cfg = cfg
        headers = {"Content-Type": "application/json"}
        if cfg.auth_token:
            headers["Authorization"] = f"Bearer {cfg.auth_token}"
        self._http = httpx.Client(timeout=cfg.timeout, headers=headers, transport=transport)
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(cfg.max_concurrency)
        self._lock = threading.Lock()
        self.requests_sent = 0

    def close(self) -> None:
        self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def backoff(self, attempt: int) -> float:
        return min(self.cfg.backoff_cap, self.cfg.backoff_base * (2 ** attempt))

    def _post(self, body: dict) -> dict:
        url = self.cfg.url(self.default_path)
        if log.isEnabledFor(logging.DEBUG):
            log.debug("POST %s %s", url, json.dumps(_elide_images(body))[:2000])
        with self._lock:
            self.requests_sent += 1
        try:
            with self._slots:
                resp = self._http.post(url, json=body)
        except httpx.HTTPError as exc:
            raise TransportError(f"{url}: {type(exc).__name__}: {exc}") from exc
        if resp.status_code >= 400:
            raise TransportError(
                f"{url}: HTTP {resp.status_code}: {resp.text[:200]}",
                status=resp.status_code,
                retryable=resp.status_code in _RETRYABLE_STATUS,
            )
        try:
            payload = resp.json()
        except ValueError:
            raise ResponseParseError(f"{url}: response is not JSON", raw=resp.text[:500]) from None
        if log.isEnabledFor(logging.DEBUG):
            log.debug("<- %s %s", url, json.dumps(payload)[:2000])
        return payload

    def _call(self, attempt_fn: Callable[[int], Any]) -> Any:
        """Run ``attempt_fn`` up to ``max_retries + 1`` times with capped exponential backoff."""
        last: GatewayError | None = None
        for attempt in range(self.cfg.max_retries + 1):
            if attempt:
                self._sleep(self.backoff(attempt - 1))
            try:
                return attempt_fn(attempt)
            except TransportError as exc:
                last = exc
                if not exc.retryable:
                    raise
            except ResponseParseError as exc:
                last = exc
            log.info("attempt %d/%d against %s failed: %s",
                     attempt + 1, self.cfg.max_retries + 1, self.cfg.base_url, last)
        assert last is not None
        raise last


class ChatClient(_Endpoint):
    """OpenAI-style chat-completions client used for coarse recognition and judging."""

    default_path = "/chat/completions"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._guided = self.cfg.guided_decoding

    def complete(self, messages: list[dict], extra: dict | None = None) -> str:
        body = {"model": self.cfg.model_id, "messages": messages, **self.cfg.params}
        if extra:
            body.update(extra)
        payload = self._post(body)
        try:
            content = payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise ResponseParseError("malformed chat-completions response", raw=json.dumps(payload)[:500]) from None
        if isinstance(content, list):  # some servers return content parts
            content = "".join(p.get("text", "") for p in content if isinstance(p, dict))
        if not isinstance(content, str):
            raise ResponseParseError("chat response content is not text", raw=repr(content))
        return content

    def classify_coarse(self, image: ImagePayload) -> CoarsePrediction:
        messages = coarse_messages(image)

        def attempt(_n: int) -> CoarsePrediction:
            extra = None
            if self._guided:
                extra = {"response_format": {
                    "type": "json_schema",
                    "json_schema": {"name": "main_object", "schema": COARSE_SCHEMA},
                }}
            try:
                text = self.complete(messages, extra)
            except TransportError as exc:
                if self._guided and exc.status == 400:
                    # server rejected constrained decoding; retry without it
                    log.warning("%s rejected response_format; disabling guided decoding", self.cfg.base_url)
                    self._guided = False
                    exc.retryable = True
                raise
            return parse_coarse(text)

        return self._call(attempt)

    def judge_pair(self, prediction: str, ground_truth: str) -> Rating:
        if not prediction or not ground_truth:
            raise ValueError("prediction and ground truth must be non-empty")
        messages = [{"role": "user", "content": render_judge_prompt(prediction, ground_truth)}]
        return self._call(lambda _n: parse_rating(self.complete(messages)))


class EmbeddingClient(_Endpoint):
    """Client for ``{"input": ...} -> {"embedding": [...]}`` embedding endpoints."""

    default_path = ""

    def _vectors(self, payload: dict, expected: int) -> list[np.ndarray]:
        if "embedding" in payload:
            raw = [payload["embedding"]]
        elif "embeddings" in payload:
            raw = payload["embeddings"]
        elif "data" in payload:  # OpenAI embeddings shape
            raw = [d["embedding"] for d in sorted(payload["data"], key=lambda d: d.get("index", 0))]
        else:
            raise ResponseParseError("embedding response has no 'embedding' field", raw=json.dumps(payload)[:500])
        if not isinstance(raw, list) or len(raw) != expected:
            raise ResponseParseError(f"expected {expected} embeddings, got {len(raw) if isinstance(raw, list) else raw!r}")
        out = []
        for vec in raw:
            try:
                out.append(as_embedding(vec))
            except ValueError as exc:
                raise InvalidEmbeddingError(f"{self.cfg.base_url}: {exc}") from None
        return out

    def _embed(self, inputs: Any, expected: int) -> list[np.ndarray]:
        body = {"model": self.cfg.model_id, "input": inputs}
        return self._call(lambda _n: self._vectors(self._post(body), expected))

    def embed_image(self, image: ImagePayload) -> np.ndarray:
        return self._embed({"image_b64": image.b64(), "media_type": image.media_type}, 1)[0]

    def embed_text(self, text: str) -> np.ndarray:
        if not isinstance(text, str) or not text.strip():
            raise ValueError("cannot embed empty text")
        return self._embed(text, 1)[0]

    def embed_texts(self, texts: Sequence[str]) -> list[np.ndarray]:
        texts = list(texts)
        if not texts:
            return []
        for t in texts:
            if not isinstance(t, str) or not t.strip():
                raise ValueError("cannot embed empty text")
        return self._embed(texts, len(texts))


@dataclass
class Gateway:
    """The set of remote endpoints the pipeline and evaluator talk to."""

    chat: ChatClient
    image_embed: EmbeddingClient
    text_embed: EmbeddingClient | None = None
    judge: ChatClient | None = None

    def classify_coarse(self, image: ImagePayload) -> CoarsePrediction:
        return self.chat.classify_coarse(image)

    def embed_image(self, image: ImagePayload) -> np.ndarray:
        return self.image_embed.embed_image(image)

    def embed_text(self, text: str) -> np.ndarray:
        if self.text_embed is None:
            raise GatewayError("no text-embedding endpoint configured")
        return self.text_embed.embed_text(text)

    def judge_pair(self, prediction: str, ground_truth: str) -> Rating:
        if self.judge is None:
            raise GatewayError("no judge endpoint configured")
        return self.judge.judge_pair(prediction, ground_truth)

    def close(self) -> None:
        for c in (self.chat, self.image_embed, self.text_embed, self.judge):
            if c is not None:
                c.close()


def probe(base_url: str, timeout: float = 2.0) -> bool:
    """True if anything answers HTTP at ``base_url`` (any status code)."""
    try:
        httpx.get(base_url, timeout=timeout)
    except httpx.HTTPError:
        return False
    return True


def classify_coarse(cfg: EndpointConfig, image: ImagePayload, **kw) -> CoarsePrediction:
    with ChatClient(cfg, **kw) as client:
        return client.classify_coarse(image)


def embed_image(cfg: EndpointConfig, image: ImagePayload, **kw) -> np.ndarray:
    with EmbeddingClient(cfg, **kw) as client:
        return client.embed_image(image)


def embed_text(cfg: EndpointConfig, text: str, **kw) -> np.ndarray:
    with EmbeddingClient(cfg, **kw) as client:
        return client.embed_text(text)


def judge_pair(cfg: EndpointConfig, prediction: str, ground_truth: str, **kw) -> Rating:
    with ChatClient(cfg, **kw) as client:
        return client.judge_pair(prediction, ground_truth)
