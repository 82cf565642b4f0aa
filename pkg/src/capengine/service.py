"""Long-running HTTP API over the pipeline, chat, and paragraph modules.

All endpoints live under /v1 and speak UTF-8 JSON with bit-exact field
names; error bodies are {"error": "..."}. Configuration is a flat key=value
file with CAPENGINE_-prefixed environment overrides.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import requests as _requests
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from starlette.concurrency import run_in_threadpool

from . import chat as chat_mod
from .backends import BACKEND_KINDS, BackendConfig, BackendSet, remote_backends
from .errors import (
    BackendUnavailable,
    EmptyCaption,
    EmptyControl,
    EmptyMask,
    MalformedResponse,
    NoCandidates,
    NoMask,
    SessionBusy,
    UnknownSession,
)
from .geometry import (
    MARGIN_RATIO,
    BoxRegion,
    LabeledPoint,
    PointLabel,
    Trajectory,
    VisualControl,
    raster_dims,
)
from .paragraph import ParagraphOptions, caption_everything, paragraph_to_wire
from .pipeline import CaptionRequest, PipelineSettings, caption_object, result_to_wire
from .prompts import LanguageControls
from .store import ImageStore, LruCache, MaskStore, SessionStore

logger = logging.getLogger("capengine.service")

_SCALAR_KEYS = {
    "listen_addr",
    "store_root",
    "cache_size",
    "max_upload_bytes",
    "margin_ratio",
    "max_tool_calls",
    "max_regions",
    "parallelism",
    "non_cot_strategy",
    "static_root",
}
_BACKEND_SUFFIXES = {"mode", "endpoint", "timeout_ms", "max_attempts", "bearer_token"}
_BACKEND_EXTRA_KEYS = {"refiner_refusal_markers", "segmenter_forward_hull_box"}

ENV_PREFIX = "CAPENGINE_"


@dataclass
class ServiceConfig:
    listen_addr: str = "127.0.0.1:8080"
    store_root: str = "capengine-data"
    cache_size: int = 64
    max_upload_bytes: int = 20 * 1024 * 1024
    margin_ratio: float = MARGIN_RATIO
    max_tool_calls: int = 3
    max_regions: int = 20
    parallelism: int = 4
    non_cot_strategy: str = "crop"
    static_root: str = ""
    backends: dict[str, BackendConfig] = field(default_factory=dict)

    @property
    def host(self) -> str:
        return self.listen_addr.rsplit(":", 1)[0]

    @property
    def port(self) -> int:
        return int(self.listen_addr.rsplit(":", 1)[1])

    def pipeline_settings(self) -> PipelineSettings:
        return PipelineSettings(
            margin_ratio=self.margin_ratio, non_cot_strategy=self.non_cot_strategy
        )


def _parse_config_lines(text: str, source: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip().lower()] = value.strip()
    return values


def _known_key(key: str) -> bool:
    if key in _SCALAR_KEYS or key in _BACKEND_EXTRA_KEYS:
        return True
    for kind in BACKEND_KINDS:
        prefix = kind + "_"
        if key.startswith(prefix) and key[len(prefix) :] in _BACKEND_SUFFIXES:
            return True
    return False


def load_service_config(
    path: str | Path | None = None, env: dict[str, str] | None = None
) -> ServiceConfig:
    """Flat key=value file plus CAPENGINE_* environment overrides."""
    env = dict(os.environ) if env is None else env
    values: dict[str, str] = {}
    if path is not None:
        values.update(_parse_config_lines(Path(path).read_text(encoding="utf-8"), str(path)))
    for name, value in env.items():
        if name.startswith(ENV_PREFIX):
            values[name[len(ENV_PREFIX) :].lower()] = value
    for key in values:
        if not _known_key(key):
            raise ValueError(f"unknown config key {key!r}")

    config = ServiceConfig()
    ints = {"cache_size", "max_upload_bytes", "max_tool_calls", "max_regions", "parallelism"}
    floats = {"margin_ratio"}
    for key in _SCALAR_KEYS:
        if key not in values:
            continue
        raw = values[key]
        if key in ints:
            setattr(config, key, int(raw))
        elif key in floats:
            setattr(config, key, float(raw))
        else:
            setattr(config, key, raw)

    backends: dict[str, BackendConfig] = {}
    for kind in BACKEND_KINDS:
        fields: dict[str, object] = {"kind": kind}
        if f"{kind}_mode" in values:
            fields["mode"] = values[f"{kind}_mode"]
        if f"{kind}_endpoint" in values:
            fields["endpoint"] = values[f"{kind}_endpoint"]
        if f"{kind}_timeout_ms" in values:
            fields["timeout_ms"] = int(values[f"{kind}_timeout_ms"])
        if f"{kind}_max_attempts" in values:
            fields["max_attempts"] = int(values[f"{kind}_max_attempts"])
        if f"{kind}_bearer_token" in values:
            fields["bearer_token"] = values[f"{kind}_bearer_token"]
        if kind == "refiner" and "refiner_refusal_markers" in values:
            fields["refusal_markers"] = tuple(
                m for m in values["refiner_refusal_markers"].split("|") if m
            )
        if kind == "segmenter" and "segmenter_forward_hull_box" in values:
            fields["forward_hull_box"] = values["segmenter_forward_hull_box"].lower() in (
                "1",
                "true",
                "yes",
            )
        backends[kind] = BackendConfig(**fields)
    config.backends = backends
    return config


# --------------------------------------------------------------------------
# Wire parsing
# --------------------------------------------------------------------------


def parse_control(obj: object) -> VisualControl:
    if not isinstance(obj, dict):
        raise ValueError("control must be an object")
    present = [k for k in ("points", "box", "trajectory") if obj.get(k) is not None]
    if len(present) != 1:
        raise ValueError("control needs exactly one of points/box/trajectory")
    kind = present[0]
    payload = obj[kind]
    if kind == "points":
        points = []
        for entry in payload:
            if len(entry) == 2:
                x, y = entry
                label = PointLabel.POSITIVE
            elif len(entry) == 3:
                x, y, raw_label = entry
                label = PointLabel(int(raw_label))
            else:
                raise ValueError("point entry must be [x,y] or [x,y,label01]")
            points.append(LabeledPoint(int(x), int(y), label))
        return VisualControl.from_points(points)
    if kind == "box":
        x0, y0, x1, y1 = payload
        return VisualControl.from_box(BoxRegion(int(x0), int(y0), int(x1), int(y1)))
    return VisualControl.from_trajectory([(float(x), float(y)) for x, y in payload])


def parse_language_controls(obj: object) -> LanguageControls:
    if obj is None:
        return LanguageControls()
    if not isinstance(obj, dict):
        raise ValueError("controls must be an object")
    known = {"sentiment", "length", "language", "factuality"}
    unknown = set(obj) - known
    if unknown:
        raise ValueError(f"unknown language controls: {sorted(unknown)}")
    kwargs: dict[str, object] = {k: obj[k] for k in known if obj.get(k) is not None}
    if "length" in kwargs:
        kwargs["length"] = int(kwargs["length"])
    return LanguageControls(**kwargs)


def parse_caption_request(body: dict, image_id: str) -> CaptionRequest:
    if not isinstance(body, dict):
        raise ValueError("body must be an object")
    if "control" not in body:
        raise ValueError("missing control")
    return CaptionRequest(
        control=parse_control(body["control"]),
        controls=parse_language_controls(body.get("controls")),
        use_cot=bool(body.get("use_cot", True)),
        refine=bool(body.get("refine", True)),
        image_id=image_id,
    )


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse({"error": message}, status_code=status)


_BACKEND_FAILURES = (
    BackendUnavailable,
    MalformedResponse,
    NoMask,
    NoCandidates,
    EmptyMask,
    EmptyCaption,
)


# --------------------------------------------------------------------------
# Application
# --------------------------------------------------------------------------


class ServiceState:
    def __init__(self, config: ServiceConfig, backends: BackendSet):
        root = Path(config.store_root)
        root.mkdir(parents=True, exist_ok=True)
        if not os.access(root, os.W_OK):
            raise ValueError(f"store root {root} is not writable")
        self.config = config
        self.backends = backends
        self.images = ImageStore(root)
        self.masks = MaskStore(root)
        self.sessions = SessionStore(root)
        self.seg_cache: LruCache[str, list] = LruCache(config.cache_size)
        self.active_sessions: dict[str, chat_mod.ChatSession] = {}
        self.session_locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    def session_lock(self, session_id: str) -> threading.Lock:
        with self._guard:
            return self.session_locks.setdefault(session_id, threading.Lock())

    def get_session(self, session_id: str) -> chat_mod.ChatSession:
        with self._guard:
            session = self.active_sessions.get(session_id)
        if session is None:
            session = self.sessions.load(session_id)  # raises UnknownSession
            with self._guard:
                session = self.active_sessions.setdefault(session_id, session)
        return session

    def register_session(self, session: chat_mod.ChatSession) -> None:
        self.sessions.create(session)
        with self._guard:
            self.active_sessions[session.session_id] = session


def create_app(config: ServiceConfig | None = None, backends: BackendSet | None = None) -> FastAPI:
    config = config or ServiceConfig()
    if backends is None:
        backends = remote_backends(config.backends)
    state = ServiceState(config, backends)
    app = FastAPI(title="capengine", docs_url=None, redoc_url=None)
    app.state.engine = state

    @app.middleware("http")
    async def request_log(request: Request, call_next):
        started = time.perf_counter()
        response = await call_next(request)
        logger.info(
            "%s %s %d %.1fms",
            request.method,
            request.url.path,
            response.status_code,
            (time.perf_counter() - started) * 1000.0,
        )
        return response

    @app.post("/v1/images")
    async def upload_image(request: Request):
        body = await request.body()
        if len(body) > config.max_upload_bytes:
            return _error(413, f"upload exceeds {config.max_upload_bytes} bytes")

        def work():
            try:
                image_id, dims, _fmt = state.images.put(body)
            except ValueError as exc:
                return _error(415, str(exc))
            return JSONResponse(
                {"image_id": image_id, "width": dims.width, "height": dims.height}
            )

        return await run_in_threadpool(work)

    @app.post("/v1/images/{image_id}/caption")
    async def caption_endpoint(image_id: str, request: Request):
        try:
            body = await request.json()
        except Exception:
            return _error(422, "invalid JSON body")

        def work():
            if not state.images.exists(image_id):
                return _error(404, f"unknown image {image_id}")
            try:
                req = parse_caption_request(body, image_id)
            except (ValueError, TypeError, KeyError) as exc:
                return _error(422, f"invalid control: {exc}")
            image = state.images.load_raster(image_id)
            try:
                result = caption_object(image, req, state.backends, config.pipeline_settings())
            except EmptyControl as exc:
                return _error(422, f"invalid control: {exc}")
            except _BACKEND_FAILURES as exc:
                return _error(502, str(exc))
            mask_id = state.masks.put(image_id, result.mask)
            return JSONResponse(result_to_wire(result, mask_id))

        return await run_in_threadpool(work)

    @app.post("/v1/images/{image_id}/chat")
    async def chat_endpoint(image_id: str, request: Request):
        try:
            body = await request.json()
        except Exception:
            return _error(422, "invalid JSON body")

        def work():
            if not state.images.exists(image_id):
                return _error(404, f"unknown image {image_id}")
            if not isinstance(body, dict):
                return _error(422, "body must be an object")
            message = body.get("message")
            if not isinstance(message, str) or not message.strip():
                return _error(422, "message must be a non-empty string")
            image = state.images.load_raster(image_id)

            session_id = body.get("session_id")
            if session_id is not None:
                try:
                    session = state.get_session(str(session_id))
                except UnknownSession:
                    return _error(404, f"unknown session {session_id}")
            else:
                if body.get("control") is None:
                    return _error(422, "first chat call must carry a control")
                try:
                    req = CaptionRequest(
                        control=parse_control(body["control"]),
                        refine=False,
                        image_id=image_id,
                    )
                except (ValueError, TypeError, KeyError) as exc:
                    return _error(422, f"invalid control: {exc}")
                try:
                    seeded = caption_object(
                        image, req, state.backends, config.pipeline_settings()
                    )
                except EmptyControl as exc:
                    return _error(422, f"invalid control: {exc}")
                except _BACKEND_FAILURES as exc:
                    return _error(502, str(exc))
                state.masks.put(image_id, seeded.mask)
                session = chat_mod.start_session(
                    image_id, raster_dims(image), seeded.mask, seeded.raw_caption
                )
                state.register_session(session)

            lock = state.session_lock(session.session_id)
            if not lock.acquire(blocking=False):
                return _error(409, f"session {session.session_id} is busy")
            try:
                before = len(session.messages)
                try:
                    reply, tool_calls, _ = chat_mod.chat_turn(
                        session,
                        message.strip(),
                        image,
                        state.backends,
                        max_tool_calls=config.max_tool_calls,
                        margin_ratio=config.margin_ratio,
                    )
                except SessionBusy as exc:
                    return _error(409, str(exc))
                except _BACKEND_FAILURES as exc:
                    return _error(502, str(exc))
                state.sessions.append_messages(
                    session.session_id, session.messages[before:]
                )
            finally:
                lock.release()
            return JSONResponse(
                {
                    "session_id": session.session_id,
                    "reply": reply,
                    "tool_calls": [
                        {"tool": c.tool, "input": c.input, "output": c.output}
                        for c in tool_calls
                    ],
                }
            )

        return await run_in_threadpool(work)

    @app.post("/v1/images/{image_id}/paragraph")
    async def paragraph_endpoint(image_id: str, request: Request):
        raw = await request.body()
        try:
            body = json.loads(raw) if raw else {}
        except ValueError:
            return _error(422, "invalid JSON body")

        def work():
            if not state.images.exists(image_id):
                return _error(404, f"unknown image {image_id}")
            if not isinstance(body, dict):
                return _error(422, "body must be an object")
            try:
                opts = ParagraphOptions(
                    max_regions=int(body.get("max_regions", config.max_regions)),
                    use_cot=bool(body.get("use_cot", False)),
                    min_confidence_ocr=float(body.get("min_confidence_ocr", 0.3)),
                    parallelism=config.parallelism,
                )
            except (ValueError, TypeError) as exc:
                return _error(422, f"invalid options: {exc}")
            image = state.images.load_raster(image_id)
            masks = state.seg_cache.get(image_id)
            cache_hit = masks is not None
            try:
                if masks is None:
                    masks = state.backends.segmenter.segment_everything(image)
                    state.seg_cache.put(image_id, masks)
                result = caption_everything(
                    image,
                    state.backends,
                    opts=opts,
                    settings=config.pipeline_settings(),
                    masks=masks,
                )
            except _BACKEND_FAILURES as exc:
                return _error(502, str(exc))
            wire = paragraph_to_wire(result)
            wire["cache_hit"] = cache_hit
            return JSONResponse(wire)

        return await run_in_threadpool(work)

    @app.get("/v1/images/{image_id}/masks/{mask_id}")
    async def get_mask(image_id: str, mask_id: str):
        def work():
            if not state.images.exists(image_id):
                return _error(404, f"unknown image {image_id}")
            try:
                rle = state.masks.get(image_id, mask_id)
            except KeyError:
                return _error(404, f"unknown mask {mask_id}")
            return JSONResponse(rle.to_json())

        return await run_in_threadpool(work)

    @app.get("/v1/healthz")
    async def healthz():
        def probe(kind: str) -> tuple[str, str]:
            backend = state.backends.by_kind(kind)
            cfg = getattr(backend, "config", None)
            if cfg is None or cfg.mode != "remote":
                return kind, "ok"
            try:
                _requests.get(cfg.endpoint, timeout=0.5)
                return kind, "ok"
            except _requests.RequestException:
                return kind, "unreachable"

        def work():
            with ThreadPoolExecutor(max_workers=len(BACKEND_KINDS)) as pool:
                statuses = dict(pool.map(probe, BACKEND_KINDS))
            overall = "ok" if all(v == "ok" for v in statuses.values()) else "degraded"
            return JSONResponse(
                {
                    "status": overall,
                    "backends": statuses,
                    "metrics": {
                        "segment_cache": {
                            "hits": state.seg_cache.hits,
                            "misses": state.seg_cache.misses,
                        }
                    },
                }
            )

        return await run_in_threadpool(work)

    static_root = Path(config.static_root) if config.static_root else None
    if static_root and static_root.is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=static_root, html=True), name="ui")

    return app
