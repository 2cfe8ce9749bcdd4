"""Near-real-time study inference: the pipeline behind one request and an
HTTP/1.1 listener exposing it.

Endpoints:
  POST /v1/infer    InferenceBundle JSON -> InferenceResult JSON
  GET  /v1/health   model version + uptime

Error mapping: malformed JSON or schema violations -> 400 with a field path;
pipeline errors (e.g. no diagnostic content) -> 422 with an error code;
more than max_concurrent in-flight requests -> 429.

Timing starts at request receipt (not at any upstream transfer) and is
logged as one JSON line per request with a monotonic-clock breakdown of
{ingest, preprocess, pool, heads, render}. The reference full-scale GPU
deployment this mirrors reports 4.17 +/- 2.42 s end to end; that figure is
context, not a target - the desk-scale stub pipeline stays under 1 s.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from dataclasses import dataclass, field, replace
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Dict, List, Optional

import numpy as np

from .acquisition import assign_phases, select_diagnostic
from .encoder import stub_encode, video_features
from .errors import ValidationError
from .milhead import TrainedHeadModel, forward_heads, pool_study
from .reports import render_report
from .study import read_embeddings, study_from_json
from .types import SEGMENTS, StudyRecord


@dataclass
class InferenceModel:
    heads: TrainedHeadModel
    version: str
    stub_seed: int = 0
    embeddings: Optional[np.ndarray] = None  # optional server-side store

    @staticmethod
    def load(
        checkpoint_path: str,
        embeddings_path: Optional[str] = None,
        stub_seed: int = 0,
    ) -> "InferenceModel":
        heads = TrainedHeadModel.load(checkpoint_path)
        with open(checkpoint_path, "rb") as fh:
            digest = hashlib.sha256(fh.read()).hexdigest()[:12]
        store = read_embeddings(embeddings_path) if embeddings_path else None
        return InferenceModel(
            heads=heads,
            version=f"angiokit-mil-{digest}",
            stub_seed=stub_seed,
            embeddings=store,
        )


@dataclass
class InferenceResult:
    segments: Dict[str, Dict[str, float]]
    report_text: str
    attention_weights: List[float]
    video_ids: List[str]
    latency_ms: Dict[str, float]
    model_version: str

    def to_json(self) -> dict:
        return {
            "result": {
                "segments": self.segments,
                "report_text": self.report_text,
                "attention_weights": self.attention_weights,
                "video_ids": self.video_ids,
                "model_version": self.model_version,
            },
            "latency_ms": self.latency_ms,
        }


def parse_bundle(obj: dict) -> StudyRecord:
    """Validate an InferenceBundle (one study, labels optional)."""
    if not isinstance(obj, dict):
        raise ValidationError("bundle: expected a JSON object")
    study_obj = obj.get("study", obj)
    return study_from_json(study_obj, path="bundle.study")


def _resolve_embedding(model: InferenceModel, video) -> np.ndarray:
    if video.embedding is not None:
        return np.asarray(video.embedding, dtype=np.float64)
    if video.embedding_ref is not None:
        if model.embeddings is None:
            raise ValidationError(
                f"video {video.video_id}: embedding_ref given but the service "
                "has no embedding store",
                code="missing_embedding",
            )
        if not (0 <= video.embedding_ref < len(model.embeddings)):
            raise ValidationError(
                f"video {video.video_id}: dangling embedding_ref",
                code="dangling_embedding_ref",
            )
        return np.asarray(model.embeddings[video.embedding_ref], dtype=np.float64)
    return stub_encode(video_features(video), seed=model.stub_seed)


def infer_study(study: StudyRecord, model: InferenceModel) -> InferenceResult:
    """assign_phases -> select_diagnostic(10) -> pool -> heads -> render,
    each stage timed on the monotonic clock."""
    timer = time.perf_counter
    t0 = timer()
    study.validate(require_complete=True)
    t_ingest = timer()

    staged = replace(study, videos=assign_phases(study.videos))
    kept, mask = select_diagnostic(staged, model.heads.pooling_config.max_videos)
    embs = np.zeros((model.heads.pooling_config.max_videos, model.heads.pooling_config.embed_dim))
    for i, v in enumerate(kept):
        embs[i] = _resolve_embedding(model, v)
    t_pre = timer()

    from .types import VIEW_CLASSES

    view_index = {v: i for i, v in enumerate(VIEW_CLASSES)}
    view_ids = np.zeros(mask.size, dtype=int)
    for i, v in enumerate(kept):
        view_ids[i] = view_index[v.view_class or "Other"]
    state = pool_study(
        embs, mask, model.heads.pooling_config, model.heads.params, view_ids=view_ids
    )
    t_pool = timer()

    preds, _ = forward_heads(
        state.embedding, model.heads.params, model.heads.head_config, training=False
    )
    t_heads = timer()

    def _sigmoid(z):
        return 1.0 / (1.0 + np.exp(-z))

    segments: Dict[str, Dict[str, float]] = {}
    for i, seg in enumerate(SEGMENTS):
        segments[seg] = {
            "stenosis_pct": float(np.clip(preds["stenosis_pct"][i], 0.0, 100.0)),
            "stenosis": float(_sigmoid(preds["logits_stenosis"][i])),
            "calcification": float(_sigmoid(preds["logits_calcification"][i])),
            "thrombus": float(_sigmoid(preds["logits_thrombus"][i])),
            "cto": float(_sigmoid(preds["logits_cto"][i])),
        }
    report = render_report(segments)
    t_render = timer()

    to_ms = lambda a, b: (b - a) * 1000.0  # noqa: E731
    return InferenceResult(
        segments=segments,
        report_text=report,
        attention_weights=[float(w) for w in state.weights[: len(kept)]],
        video_ids=[v.video_id for v in kept],
        latency_ms={
            "ingest": to_ms(t0, t_ingest),
            "preprocess": to_ms(t_ingest, t_pre),
            "pool": to_ms(t_pre, t_pool),
            "heads": to_ms(t_pool, t_heads),
            "render": to_ms(t_heads, t_render),
            "total": to_ms(t0, t_render),
        },
        model_version=model.version,
    )


# ---------------------------------------------------------------------------
# HTTP listener
# ---------------------------------------------------------------------------


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8080
    max_concurrent: int = 8
    latency_log_path: Optional[str] = None


class _LatencyLog:
    def __init__(self, path: Optional[str]):
        self.path = path
        self._lock = threading.Lock()

    def write(self, record: dict) -> None:
        if self.path is None:
            return
        line = json.dumps(record, sort_keys=True)
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")


class InferenceService:
    """Long-running listener wrapping an immutable model."""

    def __init__(self, model: InferenceModel, config: ServiceConfig):
        self.model = model
        self.config = config
        self.started_at = time.monotonic()
        self._slots = threading.BoundedSemaphore(config.max_concurrent)
        self._log = _LatencyLog(config.latency_log_path)
        self._request_counter = 0
        self._counter_lock = threading.Lock()
        service = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, *args):  # keep stdout quiet; JSONL log instead
                pass

            def _reply(self, status: int, payload: dict) -> None:
                body = json.dumps(payload, sort_keys=True).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_GET(self):
                if self.path != "/v1/health":
                    self._reply(404, {"error": "not_found"})
                    return
                self._reply(
                    200,
                    {
                        "status": "ok",
                        "model_version": service.model.version,
                        "uptime_s": time.monotonic() - service.started_at,
                    },
                )

            def do_POST(self):
                if self.path != "/v1/infer":
                    self._reply(404, {"error": "not_found"})
                    return
                if not service._slots.acquire(blocking=False):
                    self._reply(429, {"error": "overloaded"})
                    return
                try:
                    status, payload = service.handle_infer_bytes(
                        self.rfile.read(int(self.headers.get("Content-Length", 0) or 0))
                    )
                    self._reply(status, payload)
                finally:
                    service._slots.release()

        self._handler_cls = Handler
        self._server: Optional[ThreadingHTTPServer] = None
        self._thread: Optional[threading.Thread] = None

    def handle_infer_bytes(self, raw: bytes):
        """Shared request core: parse, validate, infer, log. Returns
        (status, payload)."""
        with self._counter_lock:
            self._request_counter += 1
            request_id = self._request_counter
        received = time.perf_counter()
        try:
            try:
                obj = json.loads(raw.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                return 400, {"error": "malformed_json", "detail": str(exc)}
            try:
                study = parse_bundle(obj)
            except ValidationError as exc:
                return 400, {"error": "invalid_bundle", "code": exc.code, "detail": str(exc)}
            try:
                result = infer_study(study, self.model)
            except ValidationError as exc:
                return 422, {"error": "pipeline_error", "code": exc.code, "detail": str(exc)}
            self._log.write(
                {
                    "request_id": request_id,
                    "study_id": study.study_id,
                    "latency_ms": result.latency_ms,
                    "wall_ms": (time.perf_counter() - received) * 1000.0,
                    "model_version": self.model.version,
                }
            )
            return 200, result.to_json()
        except Exception as exc:  # noqa: BLE001 - listener must never die
            return 500, {"error": "internal", "detail": str(exc)}

    def start(self) -> None:
        self._server = ThreadingHTTPServer(
            (self.config.host, self.config.port), self._handler_cls
        )
        self._server.daemon_threads = True
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    @property
    def address(self):
        return self._server.server_address

    def stop(self) -> None:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
            self._thread.join(timeout=5)


def serve(model: InferenceModel, config: ServiceConfig) -> InferenceService:
    """Start the listener; returns the running service handle."""
    service = InferenceService(model, config)
    service.start()
    return service
