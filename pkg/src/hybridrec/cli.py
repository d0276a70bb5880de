"""Hybrid coarse/fine object recognition: index, recognize, evaluate, serve.

    hybridrec build-index embeddings.jsonl -o centroids.hymx
    hybridrec recognize photo.jpg --config app.yaml --json
    hybridrec eval manifest.jsonl --predictions preds.jsonl --metrics em,routing
    hybridrec calibrate --outcomes runs/val/outcomes.jsonl
    hybridrec stats manifest.jsonl
    hybridrec serve --config app.yaml

Exit codes: 0 ok, 2 configuration, 3 I/O, 4 remote endpoint, 5 bad data.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .config import AppConfig, load_config, make_gateway
from .errors import (
    CentroidIndexError,
    ConfigError,
    GatewayError,
    ManifestError,
    RouterError,
)
from .evaluate import (
    METRICS,
    CalibrationSample,
    EvalRunner,
    SimilarityScorer,
    calibrate_threshold,
    default_grid,
    exact_match,
    load_predictions,
    read_outcomes,
)
from .gateway import ChatClient, EmbeddingClient, ImagePayload
from .index import CentroidIndex, IndexBuilder, read_build_jsonl
from .manifests import load_manifest, summarize
from .router import Router

log = logging.getLogger("hybridrec")

EXIT_CONFIG, EXIT_IO, EXIT_ENDPOINT, EXIT_DATA = 2, 3, 4, 5

_RESERVED = set(vars(logging.makeLogRecord({})))


class JsonFormatter(logging.Formatter):
    """One JSON object per line, including any ``extra=`` fields."""

    def format(self, record: logging.LogRecord) -> str:
        out = {
            "ts": round(record.created, 3),
            "level": record.levelname.lower(),
            "logger": record.name,
            "msg": record.getMessage(),
        }
        for k, v in record.__dict__.items():
            if k not in _RESERVED and k not in out:
                out[k] = v
        if record.exc_info:
            out["exc"] = self.formatException(record.exc_info)
        return json.dumps(out, default=str)


def setup_logging(level: str, as_json: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter() if as_json else logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level.upper())


def _emit(args, payload: dict, text: str) -> None:
    if args.json:
        print(json.dumps(payload, ensure_ascii=False, sort_keys=True))
    else:
        print(text)


def _config(args, **overrides) -> AppConfig:
    return load_config(args.config, overrides=overrides)


def _abspath(p: str | None) -> str | None:
    return str(Path(p).resolve()) if p else None


# --- subcommands -------------------------------------------------------------

def cmd_build_index(args) -> int:
    t0 = time.perf_counter()
    builder = IndexBuilder()
    n = 0
    for sample in read_build_jsonl(args.embeddings):
        builder.accumulate(sample)
        n += 1
    index = builder.finalize()
    index.save(args.output)
    stats = {**index.stats(), "samples": n, "output": str(args.output),
             "seconds": round(time.perf_counter() - t0, 3)}
    _emit(args, stats, f"wrote {args.output}: {stats['classes']} classes, dim {stats['dim']}, "
                       f"{n} samples, {stats['degenerate']} degenerate")
    return 0


def _router(args, cfg: AppConfig) -> Router:
    rcfg = cfg.router()
    return Router(rcfg, CentroidIndex.load(rcfg.index_path), make_gateway(cfg))


def cmd_recognize(args) -> int:
    cfg = _config(args, **{"router.threshold": args.threshold, "router.index_path": _abspath(args.index)})
    router = _router(args, cfg)
    image = ImagePayload.from_path(args.image)
    result = router.recognize(image)
    payload = {"image": args.image, **result.to_json(include_trace=not args.no_trace)}
    sim = "" if result.similarity is None else f" (similarity {result.similarity:.3f})"
    _emit(args, payload, f"{result.label} [{result.granularity.value}, {result.trace.decision.value}]{sim}")
    return 0


def _metrics(spec: str) -> tuple[str, ...]:
    metrics = tuple(m.strip() for m in spec.split(",") if m.strip())
    bad = set(metrics) - set(METRICS)
    if bad:
        raise ConfigError(f"unknown metrics {sorted(bad)}; choose from {', '.join(METRICS)}")
    return metrics


def cmd_eval(args) -> int:
    metrics = _metrics(args.metrics)
    manifest = load_manifest(args.manifest, missing_images=args.missing_images)
    kwargs: dict = {"metrics": metrics}
    # only touch config/endpoints when a metric or the live router needs them
    cfg = None
    if args.predictions is None or "sbert" in metrics or "llm" in metrics:
        cfg = _config(args, **{"router.threshold": args.threshold, "router.index_path": _abspath(args.index)})
    if args.predictions is not None:
        kwargs["predictions"] = load_predictions(args.predictions)
    else:
        kwargs["router"] = _router(args, cfg)
    if "sbert" in metrics:
        kwargs["text_embedder"] = EmbeddingClient(cfg.endpoint("text_embed"))
    if "llm" in metrics:
        kwargs["judge"] = ChatClient(cfg.endpoint("judge"))
    concurrency = args.concurrency or (cfg.eval().concurrency if cfg else 4)
    runner = EvalRunner(concurrency=concurrency, **kwargs)

    out_dir = Path(args.out) if args.out else None
    outcomes_path = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        outcomes_path = out_dir / "outcomes.jsonl"
    report, outcomes = runner.run(manifest, outcomes_path, averaging="micro" if args.micro else "macro")
    if out_dir:
        (out_dir / "report.json").write_text(report.dumps(), encoding="utf-8")
        (out_dir / "report.txt").write_text(report.render() + "\n", encoding="utf-8")
    failed = sum(1 for o in outcomes if not o.ok)
    if failed:
        log.warning("%d samples failed and were excluded from the means", failed)
    _emit(args, report.to_json(), report.render())
    return 0


def cmd_calibrate(args) -> int:
    grid = default_grid(args.grid_points)
    cfg = None
    if args.outcomes:
        outcomes = list(read_outcomes(args.outcomes).values())
    else:
        if not args.manifest:
            raise ConfigError("give a validation manifest or --outcomes")
        # the threshold does not influence the recorded traces; any valid value works
        cfg = _config(args, **{"router.threshold": 0.0, "router.index_path": _abspath(args.index)})
        manifest = load_manifest(args.manifest, missing_images=args.missing_images)
        runner = EvalRunner(metrics=("em",), router=_router(args, cfg),
                            concurrency=args.concurrency or cfg.eval().concurrency)
        _, outcomes = runner.run(manifest, args.save_outcomes)
    samples = [CalibrationSample.from_outcome(o) for o in outcomes if o.ok]
    if args.metric == "sbert":
        cfg = cfg or _config(args)
        metric = SimilarityScorer(EmbeddingClient(cfg.endpoint("text_embed")))
    else:
        metric = exact_match
    result = calibrate_threshold(samples, grid, metric, args.metric)
    _emit(args, result.to_json(),
          f"threshold {result.threshold:.4f} ({args.metric} {result.best_score * 100:.2f} "
          f"over {len(samples)} samples)")
    return 0


def cmd_stats(args) -> int:
    manifest = load_manifest(args.manifest, missing_images=args.missing_images)
    stats = summarize(manifest)
    _emit(args, stats.to_json(), stats.render())
    return 0


def cmd_serve(args) -> int:
    from .service import serve

    cfg = _config(args, **{"router.threshold": args.threshold, "router.index_path": _abspath(args.index),
                           "service.bind_address": args.bind})
    serve(cfg)
    return 0


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--json", action="store_true", help="machine-readable JSON on stdout")
    common.add_argument("--log-level", default="warning")
    common.add_argument("--log-json", action="store_true", help="log as JSON lines")

    live = argparse.ArgumentParser(add_help=False)
    live.add_argument("--threshold", type=float, help="similarity threshold (overrides config)")
    live.add_argument("--index", help="centroid index file (overrides config)")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--missing-images", choices=("error", "warn", "ignore"), default="error")

    p = argparse.ArgumentParser(prog="hybridrec", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("build-index", parents=[common], help="build a centroid index from embeddings JSONL")
    s.add_argument("embeddings")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_build_index)

    s = sub.add_parser("recognize", parents=[common, live], help="recognize one image")
    s.add_argument("image")
    s.add_argument("--no-trace", action="store_true")
    s.set_defaults(func=cmd_recognize)

    s = sub.add_parser("eval", parents=[common, live, data], help="evaluate on a manifest")
    s.add_argument("manifest")
    s.add_argument("--predictions", help="precomputed predictions JSONL (offline)")
    s.add_argument("--metrics", default="em,sbert,llm,routing")
    s.add_argument("--out", help="directory for outcomes.jsonl and reports (enables resume)")
    s.add_argument("--concurrency", type=int)
    s.add_argument("--micro", action="store_true", help="average over samples instead of datasets")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("calibrate", parents=[common, data], help="choose the similarity threshold")
    s.add_argument("manifest", nargs="?", help="validation manifest (runs the live pipeline)")
    s.add_argument("--outcomes", help="per-sample outcomes JSONL from a live eval run")
    s.add_argument("--index")
    s.add_argument("--metric", choices=("em", "sbert"), default="em")
    s.add_argument("--grid-points", type=int, default=101)
    s.add_argument("--concurrency", type=int)
    s.add_argument("--save-outcomes", help="where to keep the live outcomes")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("stats", parents=[common, data], help="manifest statistics")
    s.add_argument("manifest")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("serve", parents=[common, live], help="run the HTTP service")
    s.add_argument("--bind", help="host:port (overrides config)")
    s.set_defaults(func=cmd_serve)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level, args.log_json)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (GatewayError, RouterError) as exc:
        log.error("endpoint error: %s", exc)
        return EXIT_ENDPOINT
    except (ManifestError, CentroidIndexError, ValueError, KeyError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
