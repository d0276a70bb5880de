"""HTTP recognition service.

Routes:

``POST /v1/recognize``
    body ``{"image_b64": str, "media_type": str}``; returns a RecognitionResult.
``GET /healthz``
    index statistics and endpoint reachability.
``POST /admin/reload``
    load an index (body ``{"index_path": ...}`` or the configured path) and
    swap it in atomically.
"""

from __future__ import annotations

import asyncio
import json
import logging
import time
from contextlib import asynccontextmanager
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.concurrency import run_in_threadpool
from fastapi.responses import JSONResponse

from .config import AppConfig, ServiceSettings, make_gateway
from .errors import HybridRecError, RouterError
from .gateway import ImagePayload, probe
from .index import CentroidIndex
from .router import Router

log = logging.getLogger("hybridrec.service")

SCHEMA_PATH = Path(__file__).with_name("schemas") / "recognition_result.schema.json"


def response_schema() -> dict:
    return json.loads(SCHEMA_PATH.read_text(encoding="utf-8"))


def _error(status: int, message: str, **extra) -> JSONResponse:
    return JSONResponse({"error": message, **extra}, status_code=status)


def create_app(
    settings: ServiceSettings | None = None,
    router: Router | None = None,
    endpoints: dict[str, str] | None = None,
    index_path: str | None = None,
) -> FastAPI:
    """Build the ASGI app around ``router``.

    ``router`` may be None at construction; requests get 503 until one is
    attached with ``app.state.router = ...``.  ``endpoints`` maps endpoint
    names to base URLs to probe at startup.
    """
    settings = settings or ServiceSettings()

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        for name, url in (endpoints or {}).items():
            ok = await run_in_threadpool(probe, url)
            app.state.endpoint_health[name] = ok
            if not ok:
                log.warning("endpoint %s (%s) is not reachable at startup", name, url)
        yield

    app = FastAPI(title="hybridrec", docs_url=None, redoc_url=None, lifespan=lifespan)
    app.state.router = router
    app.state.settings = settings
    app.state.index_path = index_path
    app.state.endpoint_health = {}

    @app.get("/healthz")
    async def healthz():
        r: Router | None = app.state.router
        body = {"status": "ok" if r is not None else "starting",
                "endpoints": dict(app.state.endpoint_health)}
        if r is not None:
            body.update(r.index.stats())
            body["threshold"] = r.cfg.threshold
        return JSONResponse(body, status_code=200 if r is not None else 503)

    @app.post("/v1/recognize")
    async def recognize(request: Request):
        declared = request.headers.get("content-length")
        if declared and declared.isdigit() and int(declared) > settings.max_body_bytes:
            return _error(413, "request body too large")
        body = await request.body()
        if len(body) > settings.max_body_bytes:
            return _error(413, "request body too large")
        r: Router | None = app.state.router
        if r is None:
            return _error(503, "index not loaded")
        try:
            payload = json.loads(body)
        except (ValueError, UnicodeDecodeError):
            return _error(400, "body is not valid JSON")
        if not isinstance(payload, dict) or not isinstance(payload.get("image_b64"), str):
            return _error(400, "'image_b64' (string) is required")
        media_type = payload.get("media_type", "image/jpeg")
        if not isinstance(media_type, str):
            return _error(400, "'media_type' must be a string")
        try:
            image = ImagePayload.from_b64(payload["image_b64"], media_type)
        except ValueError as exc:
            return _error(400, str(exc))

        t0 = time.perf_counter()
        try:
            result = await asyncio.wait_for(run_in_threadpool(r.recognize, image), settings.request_timeout)
        except asyncio.TimeoutError:
            return _error(504, "recognition timed out")
        except RouterError as exc:
            log.warning("recognition failed", extra={"stage": exc.stage, "error": str(exc.cause)})
            return _error(502, str(exc.cause), stage=exc.stage)
        log.info("recognized", extra={
            "label": result.label,
            "decision": result.trace.decision.value,
            "timings_ms": result.trace.timings_ms,
            "total_ms": round((time.perf_counter() - t0) * 1000, 3),
        })
        return result.to_json(settings.include_trace, settings.max_raw_response)

    @app.post("/admin/reload")
    async def reload(request: Request):
        r: Router | None = app.state.router
        if r is None:
            return _error(503, "router not configured")
        body = await request.body()
        try:
            payload = json.loads(body) if body.strip() else {}
        except ValueError:
            return _error(400, "body is not valid JSON")
        path = payload.get("index_path") or app.state.index_path
        if not path:
            return _error(400, "no index_path given or configured")
        try:
            index = await run_in_threadpool(CentroidIndex.load, path)
        except (OSError, HybridRecError) as exc:
            return _error(400, f"cannot load index: {exc}")
        r.swap_index(index)
        app.state.index_path = path
        log.info("index reloaded from %s", path)
        return index.stats()

    return app


def build_app(config: AppConfig) -> FastAPI:
    """App wired from configuration, with a live gateway and the configured index."""
    rcfg = config.router()
    index = CentroidIndex.load(rcfg.index_path)
    gateway = make_gateway(config, need_text=False, need_judge=False)
    endpoints = {n: config.endpoint(n).base_url for n in ("mllm", "image_embed")}
    return create_app(config.service(), Router(rcfg, index, gateway), endpoints, rcfg.index_path)


def serve(config: AppConfig) -> None:
    import uvicorn

    settings = config.service()
    host, port = settings.host_port
    app = build_app(config)
    # uvicorn stops accepting on SIGTERM/SIGINT and drains in-flight requests
    uvicorn.run(app, host=host, port=port, log_config=None,
                timeout_graceful_shutdown=int(settings.graceful_shutdown_s))
