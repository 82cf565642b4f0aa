"""Model backends: segmenter, captioner, refiner, VQA, and OCR.

Each capability has a deterministic in-process mock and a remote HTTP client
speaking the JSON wire protocol (all POST, UTF-8 JSON bodies):

    /segment      {"image_b64","points":[[x,y,lbl01],..],"box":[..]|null,"multimask":true}
                  -> {"candidates":[{"rle":{...},"score":s},...]}
    /segment_all  {"image_b64"} -> {"masks":[{"rle":{...}},...]}
    /caption      {"image_b64","prefix"} -> {"text"}
    /refine       {"prompt"} -> {"text"}
    /vqa          {"image_b64","question"} -> {"answer"}
    /ocr          {"image_b64"} -> {"lines":[{"text","box":[..],"conf":c},...]}

Non-2xx responses carry {"error": "..."}. RLE objects use the geometry
module's textual form and are validated on receipt.
"""

from __future__ import annotations

import base64
import hashlib
import io
import random
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import requests

from .errors import (
    BackendUnavailable,
    EmptyCaption,
    InvalidRle,
    MalformedResponse,
    NoMask,
    Refusal,
)
from .geometry import (
    BitMask,
    BoxRegion,
    ImageDims,
    PointLabel,
    RleMask,
    SegPrompt,
    raster_dims,
    rle_decode,
    rle_encode,
)

BACKEND_KINDS = ("segmenter", "captioner", "refiner", "vqa", "ocr")

DEFAULT_REFUSAL_MARKERS = ("I cannot", "I'm sorry")

# Retry policy: exponential backoff with full jitter.
RETRY_BASE_S = 0.2
RETRY_FACTOR = 2.0


@dataclass(frozen=True)
class BackendConfig:
    kind: str
    mode: str = "mock"
    endpoint: str = ""
    timeout_ms: int = 30000
    max_attempts: int = 3
    bearer_token: str | None = None
    refusal_markers: tuple[str, ...] = DEFAULT_REFUSAL_MARKERS
    forward_hull_box: bool = True

    def __post_init__(self) -> None:
        if self.kind not in BACKEND_KINDS:
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.mode not in ("remote", "mock"):
            raise ValueError(f"unknown backend mode {self.mode!r}")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.mode == "remote" and not self.endpoint:
            raise ValueError("remote backend needs an endpoint")
        if self.mode == "mock" and self.endpoint:
            raise ValueError("mock backend must not carry an endpoint")


@dataclass(frozen=True)
class SegmentationCandidate:
    mask: RleMask
    score: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class OcrLine:
    text: str
    box: BoxRegion
    confidence: float

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("OCR line text must be non-empty")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


def raster_digest8(image: np.ndarray) -> str:
    """First 8 hex chars of sha256 over dims-tagged raw RGB bytes."""
    dims = raster_dims(image)
    h = hashlib.sha256()
    h.update(f"{dims.width}x{dims.height}:".encode("ascii"))
    h.update(np.ascontiguousarray(image).tobytes())
    return h.hexdigest()[:8]


def text_digest8(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:8]


def encode_image_b64(image: np.ndarray) -> str:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(image), mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def check_refusal(text: str, markers: Sequence[str]) -> str:
    for marker in markers:
        if text.startswith(marker):
            raise Refusal(f"refiner refused: {text[:80]!r}")
    return text


# --------------------------------------------------------------------------
# Transport + retry
# --------------------------------------------------------------------------


class TransportError(Exception):
    """Network-level failure (connect/timeout); always retriable."""


@dataclass
class HttpResponse:
    status: int
    payload: object


Transport = Callable[[str, dict, float, dict], HttpResponse]


def requests_transport(url: str, body: dict, timeout_s: float, headers: dict) -> HttpResponse:
    try:
        resp = requests.post(url, json=body, timeout=timeout_s, headers=headers)
    except requests.RequestException as exc:
        raise TransportError(str(exc)) from exc
    try:
        payload = resp.json()
    except ValueError:
        payload = None
    return HttpResponse(resp.status_code, payload)


def call_with_retry(
    config: BackendConfig,
    transport: Transport,
    path: str,
    body: dict,
    *,
    sleep: Callable[[float], None] = time.sleep,
    rng: Callable[[], float] = random.random,
) -> object:
    """POST with retries on transport errors and 5xx only.

    Full-jitter exponential backoff (base 200 ms, factor 2) between attempts,
    at most config.max_attempts attempts; 4xx fails immediately. Returns the
    decoded JSON payload of the first 2xx response.
    """
    url = config.endpoint.rstrip("/") + path
    headers = {}
    if config.bearer_token:
        headers["Authorization"] = f"Bearer {config.bearer_token}"
    attempts = 0
    while True:
        attempts += 1
        try:
            resp = transport(url, body, config.timeout_ms / 1000.0, headers)
        except TransportError as exc:
            failure, retriable = f"transport error: {exc}", True
        else:
            if 200 <= resp.status < 300:
                return resp.payload
            detail = ""
            if isinstance(resp.payload, dict) and "error" in resp.payload:
                detail = f" ({resp.payload['error']})"
            failure = f"HTTP {resp.status}{detail}"
            retriable = 500 <= resp.status < 600
        if not retriable or attempts >= config.max_attempts:
            raise BackendUnavailable(
                f"{config.kind} {path}: {failure} after {attempts} attempt(s)"
            )
        sleep(rng() * RETRY_BASE_S * RETRY_FACTOR ** (attempts - 1))


# --------------------------------------------------------------------------
# Deterministic mocks
# --------------------------------------------------------------------------


def _mock_config(kind: str) -> BackendConfig:
    return BackendConfig(kind=kind, mode="mock")


class MockSegmenter:
    """Normative mock: box prompt -> box fill (score 0.95); point prompt ->
    filled square of side floor(min(w,h)/4) centered on the first positive
    point, clamped (score 0.9). A box wins when both are present."""

    def __init__(self) -> None:
        self.config = _mock_config("segmenter")

    def segment(self, image: np.ndarray, prompt: SegPrompt) -> list[SegmentationCandidate]:
        dims = raster_dims(image)
        grid = np.zeros((dims.height, dims.width), dtype=bool)
        if prompt.box is not None:
            b = prompt.box
            grid[b.y0 : b.y1 + 1, b.x0 : b.x1 + 1] = True
            score = 0.95
        else:
            anchor = next(
                (p for p in prompt.points if p.label == PointLabel.POSITIVE), None
            )
            if anchor is None:
                raise ValueError("point prompt has no positive point")
            side = min(dims.width, dims.height) // 4
            x0 = max(0, anchor.x - side // 2)
            y0 = max(0, anchor.y - side // 2)
            x1 = min(dims.width - 1, x0 + side - 1)
            y1 = min(dims.height - 1, y0 + side - 1)
            if side > 0:
                grid[y0 : y1 + 1, x0 : x1 + 1] = True
            score = 0.9
        mask = BitMask(dims, grid.reshape(-1))
        return [SegmentationCandidate(mask=rle_encode(mask), score=score)]

    def segment_everything(self, image: np.ndarray) -> list[BitMask]:
        """2x2 quadrant partition, order TL, TR, BL, BR."""
        dims = raster_dims(image)
        xm, ym = dims.width // 2, dims.height // 2
        spans = [
            (0, ym, 0, xm),
            (0, ym, xm, dims.width),
            (ym, dims.height, 0, xm),
            (ym, dims.height, xm, dims.width),
        ]
        masks = []
        for y0, y1, x0, x1 in spans:
            grid = np.zeros((dims.height, dims.width), dtype=bool)
            grid[y0:y1, x0:x1] = True
            masks.append(BitMask(dims, grid.reshape(-1)))
        return masks


class MockCaptioner:
    """Caption is a pure function of the region pixels and the text prefix."""

    def __init__(self) -> None:
        self.config = _mock_config("captioner")

    def caption(self, image_region: np.ndarray, text_prefix: str = "") -> str:
        return f"mock-caption(h={raster_digest8(image_region)}|p={text_prefix})"


class MockRefiner:
    """Echoes the text after the last "Caption: " marker (or the prompt's last
    non-empty line) with a " [refined]" suffix."""

    def __init__(self, refusal_markers: Sequence[str] = DEFAULT_REFUSAL_MARKERS) -> None:
        self.config = _mock_config("refiner")
        self.refusal_markers = tuple(refusal_markers)

    def refine(self, prompt: str) -> str:
        lines = prompt.splitlines()
        captions = [l[len("Caption: ") :] for l in lines if l.startswith("Caption: ")]
        if captions:
            source = captions[-1]
        else:
            non_empty = [l for l in lines if l.strip()]
            source = non_empty[-1] if non_empty else prompt
        return check_refusal(f"{source} [refined]", self.refusal_markers)


class ScriptedRefiner:
    """Replays canned responses in order; literal \\n in a line becomes a
    newline so one file line can carry a multi-line action. Raises
    BackendUnavailable once the script is exhausted."""

    def __init__(
        self,
        responses: Sequence[str],
        refusal_markers: Sequence[str] = DEFAULT_REFUSAL_MARKERS,
    ) -> None:
        self.config = _mock_config("refiner")
        self.refusal_markers = tuple(refusal_markers)
        self._responses = [r.replace("\\n", "\n") for r in responses]
        self._cursor = 0
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path, **kwargs) -> "ScriptedRefiner":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([line for line in lines if line], **kwargs)

    def refine(self, prompt: str) -> str:
        with self._lock:
            if self._cursor >= len(self._responses):
                raise BackendUnavailable("scripted refiner exhausted")
            response = self._responses[self._cursor]
            self._cursor += 1
        return check_refusal(response, self.refusal_markers)


class MockVqa:
    def __init__(self) -> None:
        self.config = _mock_config("vqa")

    def vqa(self, image_region: np.ndarray, question: str) -> str:
        if not question:
            raise ValueError("question must be non-empty")
        return f"mock-vqa({question})"


class MockOcr:
    """Returns fixture lines verbatim, or nothing by default.

    Fixture file format: one record per line, `text<TAB>x0,y0,x1,y1<TAB>conf`.
    """

    def __init__(self, lines: Sequence[OcrLine] = ()) -> None:
        self.config = _mock_config("ocr")
        self._lines = list(lines)

    @classmethod
    def from_file(cls, path: str | Path) -> "MockOcr":
        lines = []
        for raw in Path(path).read_text(encoding="utf-8").splitlines():
            if not raw.strip():
                continue
            text, coords, conf = raw.split("\t")
            x0, y0, x1, y1 = (int(v) for v in coords.split(","))
            lines.append(OcrLine(text, BoxRegion(x0, y0, x1, y1), float(conf)))
        return cls(lines)

    def ocr(self, image: np.ndarray) -> list[OcrLine]:
        return list(self._lines)


# --------------------------------------------------------------------------
# Remote HTTP clients
# --------------------------------------------------------------------------


class _RemoteBase:
    def __init__(
        self,
        config: BackendConfig,
        transport: Transport = requests_transport,
        *,
        sleep: Callable[[float], None] = time.sleep,
        rng: Callable[[], float] = random.random,
    ) -> None:
        if config.mode != "remote":
            raise ValueError("remote client needs a remote-mode config")
        self.config = config
        self._transport = transport
        self._sleep = sleep
        self._rng = rng

    def _post(self, path: str, body: dict) -> dict:
        payload = call_with_retry(
            self.config, self._transport, path, body, sleep=self._sleep, rng=self._rng
        )
        if not isinstance(payload, dict):
            raise MalformedResponse(f"{self.config.kind} {path}: body is not a JSON object")
        return payload

    @staticmethod
    def _text_field(payload: dict, key: str, context: str) -> str:
        value = payload.get(key)
        if not isinstance(value, str):
            raise MalformedResponse(f"{context}: missing/non-string {key!r}")
        return value


def _parse_rle(obj: object, expected: ImageDims, context: str) -> RleMask:
    try:
        rle = RleMask.from_json(obj)
    except InvalidRle as exc:
        raise MalformedResponse(f"{context}: {exc}") from exc
    if rle.dims != expected:
        raise MalformedResponse(
            f"{context}: mask dims {rle.dims.width}x{rle.dims.height} "
            f"do not match image {expected.width}x{expected.height}"
        )
    return rle


class RemoteSegmenter(_RemoteBase):
    def segment(self, image: np.ndarray, prompt: SegPrompt) -> list[SegmentationCandidate]:
        box = prompt.box
        if box is not None and prompt.points and not self.config.forward_hull_box:
            box = None
        body = {
            "image_b64": encode_image_b64(image),
            "points": [[p.x, p.y, int(p.label)] for p in prompt.points],
            "box": [box.x0, box.y0, box.x1, box.y1] if box is not None else None,
            "multimask": True,
        }
        payload = self._post("/segment", body)
        raw = payload.get("candidates")
        if not isinstance(raw, list):
            raise MalformedResponse("segment: missing candidates list")
        dims = raster_dims(image)
        candidates = []
        for item in raw:
            if not isinstance(item, dict):
                raise MalformedResponse("segment: candidate is not an object")
            score = item.get("score")
            if not isinstance(score, (int, float)) or not 0.0 <= float(score) <= 1.0:
                raise MalformedResponse(f"segment: score {score!r} outside [0, 1]")
            mask = _parse_rle(item.get("rle"), dims, "segment")
            candidates.append(SegmentationCandidate(mask=mask, score=float(score)))
        if not candidates:
            raise NoMask("segmenter returned zero candidates")
        return candidates

    def segment_everything(self, image: np.ndarray) -> list[BitMask]:
        payload = self._post("/segment_all", {"image_b64": encode_image_b64(image)})
        raw = payload.get("masks")
        if not isinstance(raw, list):
            raise MalformedResponse("segment_all: missing masks list")
        dims = raster_dims(image)
        masks = []
        for item in raw:
            if not isinstance(item, dict):
                raise MalformedResponse("segment_all: mask entry is not an object")
            rle = _parse_rle(item.get("rle"), dims, "segment_all")
            masks.append(rle_decode(rle))
        return masks


class RemoteCaptioner(_RemoteBase):
    def caption(self, image_region: np.ndarray, text_prefix: str = "") -> str:
        payload = self._post(
            "/caption",
            {"image_b64": encode_image_b64(image_region), "prefix": text_prefix},
        )
        text = self._text_field(payload, "text", "caption").strip()
        if not text:
            raise EmptyCaption("captioner returned empty text")
        return text


class RemoteRefiner(_RemoteBase):
    def refine(self, prompt: str) -> str:
        payload = self._post("/refine", {"prompt": prompt})
        text = self._text_field(payload, "text", "refine").strip()
        if not text:
            raise MalformedResponse("refine: empty text")
        return check_refusal(text, self.config.refusal_markers)


class RemoteVqa(_RemoteBase):
    def vqa(self, image_region: np.ndarray, question: str) -> str:
        if not question:
            raise ValueError("question must be non-empty")
        payload = self._post(
            "/vqa", {"image_b64": encode_image_b64(image_region), "question": question}
        )
        answer = self._text_field(payload, "answer", "vqa").strip()
        if not answer:
            raise MalformedResponse("vqa: empty answer")
        return answer


class RemoteOcr(_RemoteBase):
    def ocr(self, image: np.ndarray) -> list[OcrLine]:
        payload = self._post("/ocr", {"image_b64": encode_image_b64(image)})
        raw = payload.get("lines")
        if not isinstance(raw, list):
            raise MalformedResponse("ocr: missing lines list")
        lines = []
        for item in raw:
            if not isinstance(item, dict):
                raise MalformedResponse("ocr: line entry is not an object")
            text = item.get("text")
            box = item.get("box")
            conf = item.get("conf")
            if not isinstance(text, str) or not text:
                raise MalformedResponse("ocr: missing line text")
            if (
                not isinstance(box, list)
                or len(box) != 4
                or not all(isinstance(v, int) for v in box)
            ):
                raise MalformedResponse("ocr: malformed box")
            if not isinstance(conf, (int, float)) or not 0.0 <= float(conf) <= 1.0:
                raise MalformedResponse(f"ocr: confidence {conf!r} outside [0, 1]")
            lines.append(OcrLine(text, BoxRegion(*box), float(conf)))
        return lines


# --------------------------------------------------------------------------
# Backend set
# --------------------------------------------------------------------------


@dataclass
class BackendSet:
    """The five capabilities the engine drives, duck-typed mock or remote."""

    segmenter: object
    captioner: object
    refiner: object
    vqa: object
    ocr: object

    def by_kind(self, kind: str) -> object:
        if kind not in BACKEND_KINDS:
            raise ValueError(f"unknown backend kind {kind!r}")
        return getattr(self, kind)


def mock_backends(
    refiner: object | None = None, ocr: object | None = None
) -> BackendSet:
    """All-mock backend set; pass a ScriptedRefiner or fixture MockOcr to
    override those two roles."""
    return BackendSet(
        segmenter=MockSegmenter(),
        captioner=MockCaptioner(),
        refiner=refiner if refiner is not None else MockRefiner(),
        vqa=MockVqa(),
        ocr=ocr if ocr is not None else MockOcr(),
    )


def remote_backends(configs: dict[str, BackendConfig]) -> BackendSet:
    """Build clients per kind; kinds configured as mock fall back to mocks."""
    built: dict[str, object] = {}
    remote_cls = {
        "segmenter": RemoteSegmenter,
        "captioner": RemoteCaptioner,
        "refiner": RemoteRefiner,
        "vqa": RemoteVqa,
        "ocr": RemoteOcr,
    }
    mock_cls = {
        "segmenter": MockSegmenter,
        "captioner": MockCaptioner,
        "refiner": MockRefiner,
        "vqa": MockVqa,
        "ocr": MockOcr,
    }
    for kind in BACKEND_KINDS:
        config = configs.get(kind, _mock_config(kind))
        if config.mode == "remote":
            built[kind] = remote_cls[kind](config)
        else:
            built[kind] = mock_cls[kind]()
    return BackendSet(**built)
