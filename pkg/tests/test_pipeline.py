"""Pipeline tests: mask choice, CoT step order, fallback, determinism.

Expected captions are composed from the normative mock rules with crop and
whiten content computed independently via direct numpy slicing.
"""

import hashlib

import numpy as np
import pytest

from capengine.backends import (
    BackendSet,
    MockCaptioner,
    MockOcr,
    MockRefiner,
    MockSegmenter,
    MockVqa,
    ScriptedRefiner,
    SegmentationCandidate,
    mock_backends,
)
from capengine.errors import BackendUnavailable, EmptyMask, NoCandidates
from capengine.geometry import (
    BoxRegion,
    ImageDims,
    RleMask,
    VisualControl,
    mask_bbox,
    rle_decode,
)
from capengine.pipeline import (
    CaptionRequest,
    PipelineSettings,
    caption_object,
    choose_mask,
    render_result,
    result_from_wire,
    result_to_wire,
)
from capengine.prompts import LanguageControls


def solid_image(w=100, h=100, value=128):
    return np.full((h, w, 3), value, dtype=np.uint8)


def digest8(image):
    h, w = image.shape[:2]
    return hashlib.sha256(f"{w}x{h}:".encode() + image.tobytes()).hexdigest()[:8]


def point_request(x=50, y=50, **kwargs):
    return CaptionRequest(control=VisualControl.click(x, y), **kwargs)


class CountingCaptioner(MockCaptioner):
    def __init__(self):
        super().__init__()
        self.calls = 0

    def caption(self, image_region, text_prefix=""):
        self.calls += 1
        return super().caption(image_region, text_prefix)


def counting_backends(refiner=None):
    captioner = CountingCaptioner()
    backends = BackendSet(
        segmenter=MockSegmenter(),
        captioner=captioner,
        refiner=refiner or MockRefiner(),
        vqa=MockVqa(),
        ocr=MockOcr(),
    )
    return backends, captioner


# ---------------------------------------------------------------------------
# choose_mask
# ---------------------------------------------------------------------------


def rle_of_area(area, w=10, h=10):
    if area == 0:
        return RleMask(ImageDims(w, h), (w * h,))
    return RleMask(ImageDims(w, h), (0, area, w * h - area) if area < w * h else (0, w * h))


def test_choose_mask_highest_score():
    candidates = [
        SegmentationCandidate(rle_of_area(10), 0.2),
        SegmentationCandidate(rle_of_area(10), 0.9),
    ]
    assert choose_mask(candidates) is candidates[1]


def test_choose_mask_single():
    candidates = [SegmentationCandidate(rle_of_area(5), 0.1)]
    assert choose_mask(candidates) is candidates[0]


def test_choose_mask_ties_by_area_then_index():
    candidates = [
        SegmentationCandidate(rle_of_area(10), 0.5),
        SegmentationCandidate(rle_of_area(20), 0.5),
    ]
    assert choose_mask(candidates) is candidates[1]
    same = [
        SegmentationCandidate(rle_of_area(20), 0.5),
        SegmentationCandidate(rle_of_area(20), 0.5),
    ]
    assert choose_mask(same) is same[0]


def test_choose_mask_errors():
    with pytest.raises(NoCandidates):
        choose_mask([])
    with pytest.raises(EmptyMask):
        choose_mask([SegmentationCandidate(rle_of_area(0), 0.9)])


# ---------------------------------------------------------------------------
# caption_object without CoT
# ---------------------------------------------------------------------------


def test_caption_object_no_cot_composed_oracle():
    image = solid_image()
    backends, captioner = counting_backends()
    result = caption_object(
        image, point_request(use_cot=False, refine=False), backends
    )
    # normative mock square: side 25 centered at (50,50)
    assert result.bbox == BoxRegion(38, 38, 62, 62)
    assert mask_bbox(rle_decode(result.mask)) == result.bbox
    # margin 0.15 of extent 24 -> 4 -> window (34,34,66,66); crop via raw slicing
    expected_crop = image[34:67, 34:67]
    assert result.raw_caption == f"mock-caption(h={digest8(expected_crop)}|p=)"
    assert result.category is None
    assert result.refined_caption is None
    assert result.fallback_used is False
    assert captioner.calls == 1
    assert [s.name for s in result.trace] == ["segment", "crop", "caption"]


def test_caption_object_cot_two_captioner_calls():
    image = solid_image()
    backends, captioner = counting_backends()
    result = caption_object(image, point_request(use_cot=True, refine=False), backends)
    assert captioner.calls == 2
    assert [s.name for s in result.trace] == ["segment", "whiten", "category", "crop", "caption"]

    # step 1: category is the mock caption of the whitened full image
    mask_grid = np.zeros((100, 100), dtype=bool)
    mask_grid[38:63, 38:63] = True
    whitened = np.where(mask_grid[:, :, None], image, np.uint8(255)).astype(np.uint8)
    category_prompt = "Question: What is the name of the object in this image? Answer:"
    expected_category = f"mock-caption(h={digest8(whitened)}|p={category_prompt})"
    assert result.category == expected_category

    # step 2: caption of the margin crop conditioned on the lowercased category
    expected_crop = image[34:67, 34:67]
    caption_prompt = (
        f"Question: Describe the {expected_category.lower()} in this image in one sentence. Answer:"
    )
    assert result.raw_caption == f"mock-caption(h={digest8(expected_crop)}|p={caption_prompt})"


def test_caption_object_refine_path():
    image = solid_image()
    backends, _ = counting_backends()
    result = caption_object(
        image,
        point_request(controls=LanguageControls(sentiment="positive")),
        backends,
    )
    assert result.refined_caption == f"{result.raw_caption} [refined]"
    assert result.fallback_used is False
    assert [s.name for s in result.trace][-1] == "refine"


def test_caption_object_box_control():
    image = solid_image(20, 20)
    request = CaptionRequest(
        control=VisualControl.from_box(BoxRegion(8, 9, 2, 3)), use_cot=False, refine=False
    )
    backends, _ = counting_backends()
    result = caption_object(image, request, backends)
    assert result.bbox == BoxRegion(2, 3, 8, 9)


def test_caption_object_non_cot_whiten_strategy():
    image = solid_image()
    backends, captioner = counting_backends()
    settings = PipelineSettings(non_cot_strategy="whiten")
    result = caption_object(
        image, point_request(use_cot=False, refine=False), backends, settings
    )
    assert captioner.calls == 1
    assert [s.name for s in result.trace] == ["segment", "whiten", "caption"]
    mask_grid = np.zeros((100, 100), dtype=bool)
    mask_grid[38:63, 38:63] = True
    whitened = np.where(mask_grid[:, :, None], image, np.uint8(255)).astype(np.uint8)
    assert result.raw_caption == f"mock-caption(h={digest8(whitened)}|p=)"


# ---------------------------------------------------------------------------
# Refiner fallback and hard failures
# ---------------------------------------------------------------------------


def test_refiner_refusal_falls_back():
    backends, _ = counting_backends(refiner=ScriptedRefiner(["I cannot comply"]))
    result = caption_object(solid_image(), point_request(), backends)
    assert result.fallback_used is True
    assert result.refined_caption == result.raw_caption


def test_refiner_unavailable_falls_back():
    backends, _ = counting_backends(refiner=ScriptedRefiner([]))  # exhausted at once
    result = caption_object(solid_image(), point_request(), backends)
    assert result.fallback_used is True
    assert result.refined_caption == result.raw_caption


def test_segmenter_failure_is_hard_error():
    class DeadSegmenter:
        def segment(self, image, prompt):
            raise BackendUnavailable("segmenter down")

    backends = mock_backends()
    backends.segmenter = DeadSegmenter()
    with pytest.raises(BackendUnavailable):
        caption_object(solid_image(), point_request(), backends)


# ---------------------------------------------------------------------------
# Determinism + serialization
# ---------------------------------------------------------------------------


def strip_durations(wire):
    for step in wire["trace"]:
        step["duration_ms"] = 0.0
    return wire


def test_caption_object_deterministic_across_runs():
    image = solid_image()
    wires = []
    for _ in range(5):
        result = caption_object(image, point_request(), mock_backends())
        wires.append(strip_durations(result_to_wire(result)))
    assert all(w == wires[0] for w in wires[1:])


def test_result_wire_round_trip():
    result = caption_object(solid_image(), point_request(), mock_backends())
    wire = result_to_wire(result, mask_id="m1")
    back = result_from_wire(wire)
    assert back == result


def test_render_result_verbosity():
    result = caption_object(solid_image(), point_request(refine=False), mock_backends())
    low = render_result(result, "low")
    assert low == {"caption": result.raw_caption}
    high = render_result(result, "high", mask_id="m9")
    assert high["mask_id"] == "m9"
    assert [s["name"] for s in high["trace"]] == [s.name for s in result.trace]
    with pytest.raises(ValueError):
        render_result(result, "medium")


def test_refiner_called_iff_requested_and_once():
    class CountingRefiner(MockRefiner):
        def __init__(self):
            super().__init__()
            self.calls = 0

        def refine(self, prompt):
            self.calls += 1
            return super().refine(prompt)

    refiner = CountingRefiner()
    backends, _ = counting_backends(refiner=refiner)
    result = caption_object(solid_image(), point_request(refine=False), backends)
    assert refiner.calls == 0
    assert all(s.name != "refine" for s in result.trace)
    assert result.refined_caption is None

    result = caption_object(solid_image(), point_request(refine=True), backends)
    assert refiner.calls == 1
    assert [s.name for s in result.trace].count("refine") == 1
