"""The triplet solver: visual control -> mask -> caption -> refined caption.

caption_object drives one request end to end: the control is normalized into
a segmenter prompt, the best mask candidate is chosen, the captioner is run
either directly on a margin crop or through the two-step visual
chain-of-thought (whitened-background category pass, then a
category-conditioned pass over the crop), and the refiner finally applies the
language controls. Refiner failures degrade to the raw caption; segmenter and
captioner failures propagate.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass

import numpy as np

from .backends import BackendSet, SegmentationCandidate, raster_digest8
from .errors import BackendUnavailable, EmptyMask, NoCandidates, Refusal
from .geometry import (
    MARGIN_RATIO,
    TRAJECTORY_POINTS,
    BitMask,
    BoxRegion,
    RleMask,
    VisualControl,
    crop_image,
    crop_window,
    mask_bbox,
    normalize_control,
    raster_dims,
    rle_decode,
    rle_encode,
    whiten_background,
)
from .prompts import (
    LanguageControls,
    build_cot_caption_prompt,
    build_cot_category_prompt,
    build_refiner_prompt,
)


@dataclass(frozen=True)
class PipelineSettings:
    margin_ratio: float = MARGIN_RATIO
    traj_points: int = TRAJECTORY_POINTS
    non_cot_strategy: str = "crop"  # crop | whiten

    def __post_init__(self) -> None:
        if self.non_cot_strategy not in ("crop", "whiten"):
            raise ValueError("non_cot_strategy must be 'crop' or 'whiten'")


@dataclass(frozen=True)
class CaptionRequest:
    control: VisualControl
    controls: LanguageControls = LanguageControls()
    use_cot: bool = True
    refine: bool = True
    image_id: str | None = None


@dataclass
class TraceStep:
    name: str  # segment | whiten | category | crop | caption | refine
    backend: str | None
    input_digest: str
    output: str
    duration_ms: float


@dataclass
class CaptionResult:
    mask: RleMask
    bbox: BoxRegion
    raw_caption: str
    category: str | None
    refined_caption: str | None
    fallback_used: bool
    trace: list[TraceStep]

    @property
    def caption(self) -> str:
        """The text a caller should display."""
        return self.refined_caption if self.refined_caption is not None else self.raw_caption


def _digest(*parts: str | bytes) -> str:
    h = hashlib.sha256()
    for part in parts:
        h.update(part.encode("utf-8") if isinstance(part, str) else part)
        h.update(b"|")
    return h.hexdigest()[:8]


def _raster_bytes(image: np.ndarray) -> bytes:
    dims = raster_dims(image)
    return f"{dims.width}x{dims.height}:".encode() + np.ascontiguousarray(image).tobytes()


def _rle_json(rle: RleMask) -> str:
    return json.dumps(rle.to_json(), separators=(",", ":"))


class _Tracer:
    def __init__(self) -> None:
        self.steps: list[TraceStep] = []

    def add(self, name: str, backend: str | None, input_digest: str, output: str, t0: float) -> None:
        self.steps.append(
            TraceStep(
                name=name,
                backend=backend,
                input_digest=input_digest,
                output=output,
                duration_ms=(time.perf_counter() - t0) * 1000.0,
            )
        )


def choose_mask(candidates: list[SegmentationCandidate]) -> SegmentationCandidate:
    """Highest score wins; ties go to the larger mask, then the lowest index."""
    if not candidates:
        raise NoCandidates("segmenter returned no candidates")
    best = max(
        range(len(candidates)),
        key=lambda i: (candidates[i].score, candidates[i].mask.area, -i),
    )
    winner = candidates[best]
    if winner.mask.area == 0:
        raise EmptyMask("chosen segmentation mask is empty")
    return winner


def _caption_from_mask(
    image: np.ndarray,
    mask: BitMask,
    bbox: BoxRegion,
    *,
    use_cot: bool,
    backends: BackendSet,
    settings: PipelineSettings,
    tracer: _Tracer,
) -> tuple[str, str | None]:
    """Shared captioning tail: CoT or direct, returns (raw_caption, category)."""
    dims = raster_dims(image)
    category = None
    rle_text = _rle_json(rle_encode(mask))

    def whiten() -> np.ndarray:
        t0 = time.perf_counter()
        out = whiten_background(image, mask)
        tracer.add("whiten", None, _digest(_raster_bytes(image), rle_text), raster_digest8(out), t0)
        return out

    def crop() -> np.ndarray:
        t0 = time.perf_counter()
        window = crop_window(bbox, settings.margin_ratio, dims)
        out = crop_image(image, window)
        coords = f"[{window.x0},{window.y0},{window.x1},{window.y1}]"
        tracer.add("crop", None, _digest(_raster_bytes(image), coords), coords, t0)
        return out

    if use_cot:
        whitened = whiten()
        t0 = time.perf_counter()
        category_prompt = build_cot_category_prompt()
        category = backends.captioner.caption(whitened, category_prompt)
        tracer.add(
            "category", "captioner", _digest(_raster_bytes(whitened), category_prompt), category, t0
        )
        cropped = crop()
        t0 = time.perf_counter()
        caption_prompt = build_cot_caption_prompt(category)
        raw = backends.captioner.caption(cropped, caption_prompt)
        tracer.add(
            "caption", "captioner", _digest(_raster_bytes(cropped), caption_prompt), raw, t0
        )
    else:
        region = whiten() if settings.non_cot_strategy == "whiten" else crop()
        t0 = time.perf_counter()
        raw = backends.captioner.caption(region, "")
        tracer.add("caption", "captioner", _digest(_raster_bytes(region), ""), raw, t0)
    return raw, category


def caption_object(
    image: np.ndarray,
    request: CaptionRequest,
    backends: BackendSet,
    settings: PipelineSettings = PipelineSettings(),
) -> CaptionResult:
    """Run the full control -> mask -> caption -> refinement pipeline."""
    dims = raster_dims(image)
    tracer = _Tracer()

    prompt = normalize_control(request.control, dims, traj_points=settings.traj_points)
    t0 = time.perf_counter()
    candidates = backends.segmenter.segment(image, prompt)
    chosen = choose_mask(candidates)
    rle = chosen.mask
    prompt_json = json.dumps(
        {
            "points": [[p.x, p.y, int(p.label)] for p in prompt.points],
            "box": [prompt.box.x0, prompt.box.y0, prompt.box.x1, prompt.box.y1]
            if prompt.box
            else None,
        },
        separators=(",", ":"),
    )
    tracer.add(
        "segment", "segmenter", _digest(_raster_bytes(image), prompt_json), _digest(_rle_json(rle)), t0
    )

    mask = rle_decode(rle)
    bbox = mask_bbox(mask)
    raw, category = _caption_from_mask(
        image,
        mask,
        bbox,
        use_cot=request.use_cot,
        backends=backends,
        settings=settings,
        tracer=tracer,
    )

    refined: str | None = None
    fallback_used = False
    if request.refine:
        refiner_prompt = build_refiner_prompt(raw, request.controls)
        t0 = time.perf_counter()
        try:
            refined = backends.refiner.refine(refiner_prompt)
        except (Refusal, BackendUnavailable):
            refined = raw
            fallback_used = True
        tracer.add("refine", "refiner", _digest(refiner_prompt), refined, t0)

    return CaptionResult(
        mask=rle,
        bbox=bbox,
        raw_caption=raw,
        category=category,
        refined_caption=refined,
        fallback_used=fallback_used,
        trace=tracer.steps,
    )


# --------------------------------------------------------------------------
# Serialization (shared with the service wire schema)
# --------------------------------------------------------------------------


def result_to_wire(result: CaptionResult, mask_id: str | None = None) -> dict:
    return {
        "mask_id": mask_id,
        "mask": result.mask.to_json(),
        "bbox": [result.bbox.x0, result.bbox.y0, result.bbox.x1, result.bbox.y1],
        "raw_caption": result.raw_caption,
        "category": result.category,
        "refined_caption": result.refined_caption,
        "fallback_used": result.fallback_used,
        "trace": [
            {
                "name": s.name,
                "backend": s.backend,
                "input_digest": s.input_digest,
                "output": s.output,
                "duration_ms": s.duration_ms,
            }
            for s in result.trace
        ],
    }


def result_from_wire(obj: dict) -> CaptionResult:
    bbox = obj["bbox"]
    return CaptionResult(
        mask=RleMask.from_json(obj["mask"]),
        bbox=BoxRegion(*(int(v) for v in bbox)),
        raw_caption=obj["raw_caption"],
        category=obj.get("category"),
        refined_caption=obj.get("refined_caption"),
        fallback_used=bool(obj.get("fallback_used", False)),
        trace=[
            TraceStep(
                name=s["name"],
                backend=s.get("backend"),
                input_digest=s["input_digest"],
                output=s["output"],
                duration_ms=float(s["duration_ms"]),
            )
            for s in obj.get("trace", [])
        ],
    )


def render_result(result: CaptionResult, verbosity: str = "low", mask_id: str | None = None) -> dict:
    """Display record for CLI/API: caption only at low verbosity, the full
    wire record (trace included) at high."""
    if verbosity == "low":
        return {"caption": result.caption}
    if verbosity == "high":
        return result_to_wire(result, mask_id=mask_id)
    raise ValueError(f"unknown verbosity {verbosity!r}")
