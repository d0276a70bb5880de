"""Application configuration.

Values come from, in decreasing precedence: explicit overrides (CLI flags),
environment variables, the YAML config file.  A required value that is
absent from all three is a ConfigError.

Environment overrides use ``HYBRIDREC__<SECTION>__<KEY>``, e.g.
``HYBRIDREC__ROUTER__THRESHOLD=0.6``; values are parsed as YAML scalars.
Endpoint tokens are read from the variable named by the endpoint's
``auth_token_env`` key (default ``HYBRIDREC_<SECTION>_TOKEN``) and are never
stored in the file.

Example::

    router:
      threshold: 0.55
      index_path: centroids.hymx
    mllm:
      base_url: http://localhost:8000/v1
      model_id: google/gemma-3-4b-it
      params: {temperature: 0}
    image_embed:
      base_url: http://localhost:8001/embed
    text_embed:
      base_url: http://localhost:8002/embed
    judge:
      base_url: https://api.openai.com/v1
      model_id: gpt-4-0613
    service:
      bind_address: 0.0.0.0:8080
    eval:
      concurrency: 8
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ConfigError
from .gateway import ChatClient, EmbeddingClient, EndpointConfig, Gateway
from .router import RouterConfig

ENV_PREFIX = "HYBRIDREC__"
ENDPOINTS = ("mllm", "image_embed", "text_embed", "judge")
_ENDPOINT_KEYS = {
    "base_url", "model_id", "timeout", "max_retries", "path", "backoff_base", "backoff_cap",
    "max_concurrency", "params", "guided_decoding", "auth_token_env",
}


@dataclass
class ServiceSettings:
    bind_address: str = "127.0.0.1:8080"
    max_body_bytes: int = 10 * 1024 * 1024
    request_timeout: float = 60.0
    include_trace: bool = True
    max_raw_response: int = 500
    graceful_shutdown_s: float = 30.0

    @property
    def host_port(self) -> tuple[str, int]:
        host, _, port = self.bind_address.rpartition(":")
        try:
            return host or "127.0.0.1", int(port)
        except ValueError:
            raise ConfigError(f"bad bind_address {self.bind_address!r}") from None


@dataclass
class EvalSettings:
    concurrency: int = 4
    output_dir: str = "runs"


@dataclass
class AppConfig:
    raw: dict = field(default_factory=dict)
    base_dir: Path = field(default_factory=Path.cwd)
    env: Mapping[str, str] = field(default_factory=lambda: dict(os.environ))

    def section(self, name: str) -> dict:
        value = self.raw.get(name) or {}
        if not isinstance(value, dict):
            raise ConfigError(f"config section {name!r} must be a mapping")
        return value

    def path(self, value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def router(self, require_index: bool = True) -> RouterConfig:
        sec = self.section("router")
        if sec.get("threshold") is None:
            raise ConfigError("router.threshold is required (set it in the config, "
                              "HYBRIDREC__ROUTER__THRESHOLD, or --threshold)")
        index_path = sec.get("index_path")
        if require_index:
            if not index_path:
                raise ConfigError("router.index_path is required")
            if not self.path(index_path).exists():
                raise ConfigError(f"index file not found: {self.path(index_path)}")
        try:
            return RouterConfig(
                threshold=float(sec["threshold"]),
                specialized_categories=frozenset(sec.get("specialized_categories", ("animal", "plant"))),
                index_path=str(self.path(index_path)) if index_path else None,
                degrade_on_retrieval_error=bool(sec.get("degrade_on_retrieval_error", True)),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid router config: {exc}") from None

    def has_endpoint(self, name: str) -> bool:
        return bool(self.section(name).get("base_url"))

    def endpoint(self, name: str) -> EndpointConfig:
        if name not in ENDPOINTS:
            raise ConfigError(f"unknown endpoint {name!r}")
        sec = dict(self.section(name))
        if not sec.get("base_url"):
            raise ConfigError(f"{name}.base_url is required")
        unknown = set(sec) - _ENDPOINT_KEYS
        if unknown:
            raise ConfigError(f"unknown keys in {name}: {sorted(unknown)}")
        token_env = sec.pop("auth_token_env", f"HYBRIDREC_{name.upper()}_TOKEN")
        try:
            return EndpointConfig(auth_token=self.env.get(token_env) or None, **sec)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {name} endpoint config: {exc}") from None

    def service(self) -> ServiceSettings:
        try:
            return ServiceSettings(**self.section("service"))
        except TypeError as exc:
            raise ConfigError(f"invalid service config: {exc}") from None

    def eval(self) -> EvalSettings:
        try:
            return EvalSettings(**self.section("eval"))
        except TypeError as exc:
            raise ConfigError(f"invalid eval config: {exc}") from None


def _set_path(tree: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = tree
    for p in parts[:-1]:
        nxt = node.get(p)
        if not isinstance(nxt, dict):
            nxt = node[p] = {}
        node = nxt
    node[parts[-1]] = value


def load_config(
    path: str | os.PathLike | None = None,
    env: Mapping[str, str] | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> AppConfig:
    """Merge file, environment and ``overrides`` (dotted keys, e.g. ``router.threshold``)."""
    env = dict(os.environ if env is None else env)
    raw: dict = {}
    base_dir = Path.cwd()
    if path is not None:
        p = Path(path)
        try:
            raw = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {p}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"config {p} must be a mapping")
        base_dir = p.resolve().parent
    raw = copy.deepcopy(raw)
    for key, value in sorted(env.items()):
        if key.startswith(ENV_PREFIX):
            dotted = key[len(ENV_PREFIX):].lower().replace("__", ".")
            _set_path(raw, dotted, yaml.safe_load(value) if value else None)
    for dotted, value in (overrides or {}).items():
        if value is not None:
            _set_path(raw, dotted, value)
    return AppConfig(raw, base_dir, env)


def make_gateway(config: AppConfig, need_text: bool = False, need_judge: bool = False) -> Gateway:
    """Clients for every configured endpoint; ``need_*`` makes an optional one mandatory."""
    text = judge = None
    if need_text or config.has_endpoint("text_embed"):
        text = EmbeddingClient(config.endpoint("text_embed"))
    if need_judge or config.has_endpoint("judge"):
        judge = ChatClient(config.endpoint("judge"))
    return Gateway(
        chat=ChatClient(config.endpoint("mllm")),
        image_embed=EmbeddingClient(config.endpoint("image_embed")),
        text_embed=text,
        judge=judge,
    )
