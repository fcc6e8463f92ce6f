"""HTTP query service: read-only search API over an immutable snapshot.

A snapshot bundles one loaded (index, model, featurizer) triple. Request
handlers grab the current snapshot reference once and use it for the whole
request, so a concurrent reload never produces torn reads: reload builds a
complete new snapshot and swaps the reference atomically, or leaves the old
one in place when loading fails.

Endpoints:
    GET  /api/health          index stats plus advertised k limits
    GET  /api/search?q=&k=    ranked results (equal to library query_text)
    GET  /api/images/{id}     one record's captions/uri metadata
    POST /api/admin/reload    swap in freshly loaded files

Errors are ``{"error": code, "message": text}`` with a matching HTTP
status. One JSON request-log line per request goes to stdout. Config comes
from an optional JSON file with environment overrides DEEPSEEK_ADDR,
DEEPSEEK_INDEX and DEEPSEEK_MODEL.
"""

from __future__ import annotations

import json
import os
import sys
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, unquote, urlparse

from . import retrieval
from .embedding import JointEmbeddingModel, load_model
from .errors import DataError, DeepSeekError
from .features import HashedTextFeaturizer
from .retrieval import VectorIndex, load_index

ENV_ADDR = "DEEPSEEK_ADDR"
ENV_INDEX = "DEEPSEEK_INDEX"
ENV_MODEL = "DEEPSEEK_MODEL"


@dataclass
class ServiceConfig:
    index_path: str
    model_path: str
    host: str = "127.0.0.1"
    port: int = 8080
    hash_dim: int | None = None  # defaults to the model's text input dim
    ngram_max: int = 2
    default_k: int = 10
    max_k: int = 100
    cors_origin: str = "*"

    def __post_init__(self):
        if not (1 <= self.default_k <= self.max_k):
            raise DataError(
                f"need 1 <= default_k <= max_k, got {self.default_k}, {self.max_k}"
            )

    @classmethod
    def load(cls, config_path=None, env=None, **overrides) -> "ServiceConfig":
        """Config file values, then env overrides, then keyword overrides."""
        env = os.environ if env is None else env
        values: dict = {}
        if config_path is not None:
            with open(config_path, encoding="utf-8") as fh:
                values.update(json.load(fh))
        if env.get(ENV_ADDR):
            host, _, port = env[ENV_ADDR].rpartition(":")
            if host:
                values["host"] = host
            values["port"] = int(port)
        if env.get(ENV_INDEX):
            values["index_path"] = env[ENV_INDEX]
        if env.get(ENV_MODEL):
            values["model_path"] = env[ENV_MODEL]
        values.update({k: v for k, v in overrides.items() if v is not None})
        if "index_path" not in values or "model_path" not in values:
            raise DataError("service config needs index_path and model_path")
        return cls(**values)


@dataclass
class Snapshot:
    index: VectorIndex
    model: JointEmbeddingModel
    featurizer: HashedTextFeaturizer


def load_snapshot(config: ServiceConfig) -> Snapshot:
    index = load_index(config.index_path)
    model = load_model(config.model_path)
    featurizer = HashedTextFeaturizer(
        dim=config.hash_dim or model.text_dim, ngram_max=config.ngram_max
    )
    return Snapshot(index=index, model=model, featurizer=featurizer)


def hit_payload(snapshot: Snapshot, hit: retrieval.RankedHit) -> dict:
    payload = {"image_id": hit.image_id, "distance": hit.distance}
    if hit.best_caption is not None:
        payload["best_caption"] = hit.best_caption
    record = snapshot.index.record(hit.image_id)
    if record is not None and record.uri is not None:
        payload["uri"] = record.uri
    return payload


class SearchService:
    """Transport-free endpoint logic; each method returns (status, body)."""

    def __init__(self, config: ServiceConfig, snapshot: Snapshot):
        self.config = config
        self.snapshot = snapshot

    def health(self) -> tuple[int, dict]:
        snapshot = self.snapshot
        return 200, {
            "status": "ok",
            "index_size": len(snapshot.index),
            "mode": snapshot.index.mode,
            "default_k": self.config.default_k,
            "max_k": self.config.max_k,
        }

    def search(self, q: str | None, k_raw: str | None) -> tuple[int, dict]:
        snapshot = self.snapshot
        if q is None or not q.strip():
            return 400, {"error": "empty_query", "message": "query text is required"}
        if k_raw is None:
            k = self.config.default_k
        else:
            try:
                k = int(k_raw)
            except ValueError:
                return 400, {"error": "bad_k", "message": f"k must be an integer, got {k_raw!r}"}
        if not (1 <= k <= self.config.max_k):
            return 400, {
                "error": "bad_k",
                "message": f"k must be in [1, {self.config.max_k}], got {k}",
            }
        started = time.perf_counter()
        result = retrieval.query_text(
            snapshot.index, snapshot.model, snapshot.featurizer, q, k
        )
        took_ms = (time.perf_counter() - started) * 1000.0
        return 200, {
            "query": q,
            "mode": snapshot.index.mode,
            "results": [hit_payload(snapshot, h) for h in result.ranked],
            "took_ms": took_ms,
        }

    def image(self, image_id: str) -> tuple[int, dict]:
        snapshot = self.snapshot
        record = snapshot.index.record(image_id)
        if record is None:
            return 404, {"error": "not_found", "message": f"unknown image id {image_id!r}"}
        return 200, {
            "image_id": record.image_id,
            "captions": record.captions,
            "uri": record.uri,
        }

    def reload(self) -> tuple[int, dict]:
        try:
            fresh = load_snapshot(self.config)
        except (DeepSeekError, OSError) as exc:
            return 409, {"error": "reload_failed", "message": str(exc)}
        self.snapshot = fresh  # atomic reference swap; in-flight requests keep the old one
        return 200, {"reloaded": True, "index_size": len(fresh.index)}


class _Handler(BaseHTTPRequestHandler):
    server_version = "deepseek"
    protocol_version = "HTTP/1.1"

    @property
    def service(self) -> SearchService:
        return self.server.service  # type: ignore[attr-defined]

    def _respond(self, status: int, body: dict) -> None:
        raw = json.dumps(body).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(raw)))
        self.send_header("Access-Control-Allow-Origin", self.service.config.cors_origin)
        self.end_headers()
        self.wfile.write(raw)
        print(json.dumps({
            "method": self.command,
            "path": self.path,
            "status": status,
            "took_ms": (time.perf_counter() - self._started) * 1000.0,
        }), flush=True)

    def do_GET(self) -> None:  # noqa: N802 (http.server API)
        self._started = time.perf_counter()
        url = urlparse(self.path)
        if url.path == "/api/health":
            self._respond(*self.service.health())
        elif url.path == "/api/search":
            params = parse_qs(url.query)
            self._respond(*self.service.search(
                params.get("q", [None])[0], params.get("k", [None])[0]
            ))
        elif url.path.startswith("/api/images/"):
            image_id = unquote(url.path[len("/api/images/"):])
            self._respond(*self.service.image(image_id))
        else:
            self._respond(404, {"error": "not_found", "message": f"no route {url.path}"})

    def do_POST(self) -> None:  # noqa: N802
        self._started = time.perf_counter()
        url = urlparse(self.path)
        if url.path == "/api/admin/reload":
            self._respond(*self.service.reload())
        else:
            self._respond(404, {"error": "not_found", "message": f"no route {url.path}"})

    def do_OPTIONS(self) -> None:  # noqa: N802 (CORS preflight for the web UI)
        self._started = time.perf_counter()
        self.send_response(204)
        self.send_header("Access-Control-Allow-Origin", self.service.config.cors_origin)
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        self.send_header("Content-Length", "0")
        self.end_headers()

    def log_message(self, fmt, *args):  # default stderr chatter -> JSON log above
        pass


class SearchServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, config: ServiceConfig, snapshot: Snapshot | None = None):
        self.service = SearchService(config, snapshot or load_snapshot(config))
        super().__init__((config.host, config.port), _Handler)


def serve(config: ServiceConfig) -> None:
    """Blockingly run the service (used by the CLI)."""
    server = SearchServer(config)
    host, port = server.server_address[:2]
    print(json.dumps({
        "listening": f"{host}:{port}",
        "index_size": len(server.service.snapshot.index),
        "mode": server.service.snapshot.index.mode,
    }), flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
        sys.stdout.flush()
