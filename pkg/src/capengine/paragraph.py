"""Caption-everything: segment all objects, caption each, summarize with OCR.

dense_caption fans out over the filtered segment-everything masks (bounded
thread pool, deterministic order); caption_everything merges the region
captions with scene text into the summary prompt and asks the refiner for
one coherent paragraph, falling back to a plain join when the refiner
refuses or is unreachable.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .backends import BackendSet, OcrLine
from .errors import BackendUnavailable, Refusal
from .geometry import (
    IOU_THRESHOLD,
    MIN_AREA_RATIO,
    BitMask,
    BoxRegion,
    RleMask,
    filter_masks,
    mask_area,
    mask_bbox,
    raster_dims,
    rle_encode,
)
from .pipeline import PipelineSettings, _caption_from_mask, _Tracer
from .prompts import LanguageControls, build_paragraph_prompt


@dataclass(frozen=True)
class ParagraphOptions:
    max_regions: int = 20
    use_cot: bool = False
    min_confidence_ocr: float = 0.3
    min_area_ratio: float = MIN_AREA_RATIO
    iou_threshold: float = IOU_THRESHOLD
    parallelism: int = 4

    def __post_init__(self) -> None:
        if self.max_regions < 1:
            raise ValueError("max_regions must be >= 1")
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")


@dataclass
class DenseCaption:
    mask_id: str
    bbox: BoxRegion
    area: int
    caption: str
    mask: RleMask


@dataclass
class ParagraphResult:
    dense: list[DenseCaption]
    ocr: list[OcrLine]
    prompt: str
    paragraph: str
    fallback_used: bool = False


def dense_caption(
    image: np.ndarray,
    backends: BackendSet,
    opts: ParagraphOptions = ParagraphOptions(),
    settings: PipelineSettings = PipelineSettings(),
    masks: list[BitMask] | None = None,
) -> list[DenseCaption]:
    """Segment everything, dedup, and caption the largest regions.

    Pre-fetched segment-everything masks may be passed in (the service does
    this to serve its cache); captions run without the text refiner. An empty
    mask set falls back to one full-image region.
    """
    dims = raster_dims(image)
    if masks is None:
        masks = backends.segmenter.segment_everything(image)
    kept = filter_masks(masks, opts.min_area_ratio, opts.iou_threshold)
    if not kept:
        kept = [BitMask.ones(dims)]
    kept = kept[: opts.max_regions]

    def caption_region(indexed: tuple[int, BitMask]) -> DenseCaption:
        index, mask = indexed
        bbox = mask_bbox(mask)
        raw, _ = _caption_from_mask(
            image,
            mask,
            bbox,
            use_cot=opts.use_cot,
            backends=backends,
            settings=settings,
            tracer=_Tracer(),
        )
        return DenseCaption(
            mask_id=f"r{index + 1}",
            bbox=bbox,
            area=mask_area(mask),
            caption=raw,
            mask=rle_encode(mask),
        )

    with ThreadPoolExecutor(max_workers=opts.parallelism) as pool:
        return list(pool.map(caption_region, enumerate(kept)))


def caption_everything(
    image: np.ndarray,
    backends: BackendSet,
    controls: LanguageControls = LanguageControls(),
    opts: ParagraphOptions = ParagraphOptions(),
    settings: PipelineSettings = PipelineSettings(),
    masks: list[BitMask] | None = None,
) -> ParagraphResult:
    """Dense captions + filtered OCR -> summary prompt -> refined paragraph.

    `controls` is accepted for interface symmetry with the caption path; the
    summary prompt itself is control-free. One refiner call total; on refusal
    or refiner outage the paragraph degrades to the joined dense captions.
    """
    dense = dense_caption(image, backends, opts, settings, masks=masks)
    ocr_lines = [
        line for line in backends.ocr.ocr(image) if line.confidence >= opts.min_confidence_ocr
    ]
    prompt = build_paragraph_prompt(dense, ocr_lines)
    try:
        paragraph = backends.refiner.refine(prompt)
        fallback_used = False
    except (Refusal, BackendUnavailable):
        paragraph = "; ".join(d.caption for d in dense)
        fallback_used = True
    return ParagraphResult(
        dense=dense,
        ocr=ocr_lines,
        prompt=prompt,
        paragraph=paragraph,
        fallback_used=fallback_used,
    )


def paragraph_to_wire(result: ParagraphResult) -> dict:
    return {
        "dense": [
            {
                "mask_id": d.mask_id,
                "bbox": [d.bbox.x0, d.bbox.y0, d.bbox.x1, d.bbox.y1],
                "area": d.area,
                "caption": d.caption,
            }
            for d in result.dense
        ],
        "ocr": [
            {
                "text": line.text,
                "box": [line.box.x0, line.box.y0, line.box.x1, line.box.y1],
                "confidence": line.confidence,
            }
            for line in result.ocr
        ],
        "prompt": result.prompt,
        "paragraph": result.paragraph,
        "fallback_used": result.fallback_used,
    }
