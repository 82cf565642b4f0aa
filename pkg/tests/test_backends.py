"""Backend tests: normative mock rules, retry policy, wire-schema validation."""

import hashlib
import json

import numpy as np
import pytest

from capengine.backends import (
    BackendConfig,
    HttpResponse,
    MockCaptioner,
    MockOcr,
    MockRefiner,
    MockSegmenter,
    MockVqa,
    RemoteCaptioner,
    RemoteOcr,
    RemoteRefiner,
    RemoteSegmenter,
    RemoteVqa,
    ScriptedRefiner,
    TransportError,
    call_with_retry,
    mock_backends,
)
from capengine.errors import (
    BackendUnavailable,
    EmptyCaption,
    MalformedResponse,
    NoMask,
    Refusal,
)
from capengine.geometry import (
    BitMask,
    BoxRegion,
    ImageDims,
    LabeledPoint,
    PointLabel,
    SegPrompt,
    mask_area,
    rle_decode,
)


def solid_image(w, h, value=128):
    return np.full((h, w, 3), value, dtype=np.uint8)


def expected_digest(image):
    h, w = image.shape[:2]
    return hashlib.sha256(f"{w}x{h}:".encode() + image.tobytes()).hexdigest()[:8]


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


def test_config_endpoint_required_iff_remote():
    with pytest.raises(ValueError):
        BackendConfig(kind="segmenter", mode="remote")
    with pytest.raises(ValueError):
        BackendConfig(kind="segmenter", mode="mock", endpoint="http://x")
    BackendConfig(kind="segmenter", mode="remote", endpoint="http://x")
    with pytest.raises(ValueError):
        BackendConfig(kind="segmenter", max_attempts=0)
    with pytest.raises(ValueError):
        BackendConfig(kind="painter")


# ---------------------------------------------------------------------------
# Mock segmenter
# ---------------------------------------------------------------------------


def test_mock_segment_point_square():
    image = solid_image(100, 100)
    prompt = SegPrompt(points=(LabeledPoint(50, 50),))
    (candidate,) = MockSegmenter().segment(image, prompt)
    assert candidate.score == 0.9
    mask = rle_decode(candidate.mask)
    # side floor(100/4)=25 centered at (50,50): columns/rows 38..62
    grid = mask.grid()
    expected = np.zeros((100, 100), dtype=bool)
    expected[38:63, 38:63] = True
    assert np.array_equal(grid, expected)


def test_mock_segment_point_clamped_at_corner():
    image = solid_image(40, 40)
    (candidate,) = MockSegmenter().segment(image, SegPrompt(points=(LabeledPoint(0, 0),)))
    mask = rle_decode(candidate.mask)
    grid = mask.grid()
    # side 10, window clamps to 0..9 in both axes
    assert grid[:10, :10].all()
    assert mask_area(mask) == 100


def test_mock_segment_box_fill():
    image = solid_image(20, 20)
    box = BoxRegion(2, 3, 8, 9)
    (candidate,) = MockSegmenter().segment(image, SegPrompt(box=box))
    assert candidate.score == 0.95
    grid = rle_decode(candidate.mask).grid()
    expected = np.zeros((20, 20), dtype=bool)
    expected[3:10, 2:9] = True
    assert np.array_equal(grid, expected)


def test_mock_segment_box_wins_over_points():
    image = solid_image(20, 20)
    prompt = SegPrompt(points=(LabeledPoint(0, 0),), box=BoxRegion(5, 5, 6, 6))
    (candidate,) = MockSegmenter().segment(image, prompt)
    assert candidate.score == 0.95
    assert mask_area(rle_decode(candidate.mask)) == 4


def test_mock_segment_uses_first_positive_point():
    image = solid_image(100, 100)
    prompt = SegPrompt(
        points=(LabeledPoint(10, 10, PointLabel.NEGATIVE), LabeledPoint(50, 50))
    )
    (candidate,) = MockSegmenter().segment(image, prompt)
    grid = rle_decode(candidate.mask).grid()
    assert grid[50, 50]
    assert not grid[10, 10]


def test_mock_segment_everything_quadrants():
    image = solid_image(100, 100)
    masks = MockSegmenter().segment_everything(image)
    assert len(masks) == 4
    assert all(mask_area(m) == 2500 for m in masks)
    tl, tr, bl, br = (m.grid() for m in masks)
    assert tl[0, 0] and not tl[0, 99]
    assert tr[0, 99] and not tr[0, 0]
    assert bl[99, 0] and not bl[0, 0]
    assert br[99, 99] and not br[0, 0]
    union = np.zeros((100, 100), dtype=bool)
    for m in masks:
        assert not (union & m.grid()).any()  # pairwise disjoint
        union |= m.grid()
    assert union.all()  # exact partition


# ---------------------------------------------------------------------------
# Mock captioner / refiner / vqa / ocr
# ---------------------------------------------------------------------------


def test_mock_caption_format_and_determinism():
    region = solid_image(10, 6, value=42)
    captioner = MockCaptioner()
    first = captioner.caption(region, "a prefix")
    assert first == f"mock-caption(h={expected_digest(region)}|p=a prefix)"
    assert captioner.caption(region, "a prefix") == first
    assert captioner.caption(region, "other") != first


def test_mock_refiner_echoes_caption_line():
    prompt = "Revise it somehow. Reply with only the revised caption.\nCaption: a dog on grass"
    assert MockRefiner().refine(prompt) == "a dog on grass [refined]"


def test_mock_refiner_falls_back_to_last_line():
    assert MockRefiner().refine("first\nsecond line") == "second line [refined]"


def test_mock_refiner_refusal_detection():
    with pytest.raises(Refusal):
        MockRefiner().refine("Caption: I cannot describe this")


def test_scripted_refiner_replays_in_order(tmp_path):
    script = tmp_path / "script.txt"
    script.write_text("first\nAction: vqa\\nAction Input: color?\nlast\n")
    refiner = ScriptedRefiner.from_file(script)
    assert refiner.refine("x") == "first"
    assert refiner.refine("x") == "Action: vqa\nAction Input: color?"
    assert refiner.refine("x") == "last"
    with pytest.raises(BackendUnavailable):
        refiner.refine("x")


def test_scripted_refiner_refusal():
    refiner = ScriptedRefiner(["I'm sorry, no."])
    with pytest.raises(Refusal):
        refiner.refine("anything")


def test_mock_vqa():
    vqa = MockVqa()
    assert vqa.vqa(solid_image(4, 4), "what color?") == "mock-vqa(what color?)"
    assert vqa.vqa(solid_image(4, 4), "what color?") == "mock-vqa(what color?)"
    with pytest.raises(ValueError):
        vqa.vqa(solid_image(4, 4), "")


def test_mock_ocr_default_empty_and_fixture(tmp_path):
    assert MockOcr().ocr(solid_image(5, 5)) == []
    fixture = tmp_path / "ocr.tsv"
    fixture.write_text("EXIT\t1,2,30,12\t0.9\n??\t0,0,5,5\t0.1\n")
    lines = MockOcr.from_file(fixture).ocr(solid_image(5, 5))
    assert [(l.text, l.confidence) for l in lines] == [("EXIT", 0.9), ("??", 0.1)]
    assert lines[0].box == BoxRegion(1, 2, 30, 12)


def test_mocks_are_deterministic_across_instances():
    image = solid_image(64, 48, value=9)
    a = mock_backends()
    b = mock_backends()
    prompt = SegPrompt(points=(LabeledPoint(30, 20),))
    assert a.segmenter.segment(image, prompt) == b.segmenter.segment(image, prompt)
    assert a.captioner.caption(image, "p") == b.captioner.caption(image, "p")
    assert a.vqa.vqa(image, "q") == b.vqa.vqa(image, "q")


# ---------------------------------------------------------------------------
# Retry policy
# ---------------------------------------------------------------------------


class FakeTransport:
    def __init__(self, script):
        self.script = list(script)
        self.calls = []

    def __call__(self, url, body, timeout_s, headers):
        self.calls.append((url, json.dumps(body, sort_keys=True), dict(headers)))
        action = self.script.pop(0)
        if isinstance(action, Exception):
            raise action
        return action


def remote_config(kind="captioner", max_attempts=3):
    return BackendConfig(
        kind=kind, mode="remote", endpoint="http://backend.test", max_attempts=max_attempts
    )


def test_retry_success_first_attempt():
    transport = FakeTransport([HttpResponse(200, {"text": "hi"})])
    sleeps = []
    payload = call_with_retry(
        remote_config(), transport, "/caption", {"a": 1}, sleep=sleeps.append
    )
    assert payload == {"text": "hi"}
    assert len(transport.calls) == 1
    assert sleeps == []


def test_retry_5xx_then_success():
    transport = FakeTransport(
        [HttpResponse(500, None), HttpResponse(502, {"error": "boom"}), HttpResponse(200, {"ok": 1})]
    )
    sleeps = []
    payload = call_with_retry(
        remote_config(max_attempts=3),
        transport,
        "/caption",
        {"a": 1},
        sleep=sleeps.append,
        rng=lambda: 1.0,
    )
    assert payload == {"ok": 1}
    assert len(transport.calls) == 3
    # full jitter with rng=1: exactly base, then base*factor
    assert sleeps == [pytest.approx(0.2), pytest.approx(0.4)]


def test_retry_404_fails_immediately():
    transport = FakeTransport([HttpResponse(404, {"error": "nope"})])
    with pytest.raises(BackendUnavailable):
        call_with_retry(remote_config(), transport, "/caption", {}, sleep=lambda s: None)
    assert len(transport.calls) == 1


def test_retry_transport_error_retries():
    transport = FakeTransport([TransportError("conn refused"), HttpResponse(200, {"ok": 1})])
    payload = call_with_retry(
        remote_config(), transport, "/caption", {}, sleep=lambda s: None
    )
    assert payload == {"ok": 1}
    assert len(transport.calls) == 2


def test_retry_exhaustion_respects_max_attempts():
    transport = FakeTransport([HttpResponse(500, None)] * 10)
    with pytest.raises(BackendUnavailable):
        call_with_retry(
            remote_config(max_attempts=2), transport, "/caption", {}, sleep=lambda s: None
        )
    assert len(transport.calls) == 2


def test_retry_never_mutates_request_payload():
    transport = FakeTransport(
        [HttpResponse(500, None), HttpResponse(500, None), HttpResponse(200, {"ok": 1})]
    )
    call_with_retry(
        remote_config(max_attempts=3), transport, "/caption", {"k": [1, 2]}, sleep=lambda s: None
    )
    bodies = [body for _, body, _ in transport.calls]
    assert len(set(bodies)) == 1


def test_retry_jitter_bounded():
    transport = FakeTransport([HttpResponse(500, None)] * 4 + [HttpResponse(200, {})])
    sleeps = []
    call_with_retry(
        remote_config(max_attempts=5), transport, "/x", {}, sleep=sleeps.append
    )
    for i, s in enumerate(sleeps):
        assert 0.0 <= s <= 0.2 * 2**i


def test_bearer_token_header():
    config = BackendConfig(
        kind="captioner",
        mode="remote",
        endpoint="http://backend.test",
        bearer_token="sekrit",
    )
    transport = FakeTransport([HttpResponse(200, {"text": "x"})])
    call_with_retry(config, transport, "/caption", {}, sleep=lambda s: None)
    assert transport.calls[0][2]["Authorization"] == "Bearer sekrit"


# ---------------------------------------------------------------------------
# Remote clients: schema validation
# ---------------------------------------------------------------------------


def rle_json(w, h, counts):
    return {"w": w, "h": h, "counts": counts}


def test_remote_segment_parses_candidates():
    image = solid_image(4, 4)
    payload = {
        "candidates": [
            {"rle": rle_json(4, 4, [0, 16]), "score": 0.7},
            {"rle": rle_json(4, 4, [12, 4]), "score": 0.4},
        ]
    }
    client = RemoteSegmenter(
        remote_config("segmenter"), FakeTransport([HttpResponse(200, payload)]), sleep=lambda s: None
    )
    candidates = client.segment(image, SegPrompt(points=(LabeledPoint(1, 1),)))
    assert [c.score for c in candidates] == [0.7, 0.4]
    assert mask_area(rle_decode(candidates[0].mask)) == 16


def test_remote_segment_empty_candidates_is_nomask():
    client = RemoteSegmenter(
        remote_config("segmenter"),
        FakeTransport([HttpResponse(200, {"candidates": []})]),
        sleep=lambda s: None,
    )
    with pytest.raises(NoMask):
        client.segment(solid_image(4, 4), SegPrompt(points=(LabeledPoint(1, 1),)))


@pytest.mark.parametrize(
    "payload",
    [
        {"candidates": [{"rle": rle_json(5, 4, [0, 20]), "score": 0.5}]},  # dims mismatch
        {"candidates": [{"rle": rle_json(4, 4, [0, 16]), "score": 1.5}]},  # bad score
        {"candidates": [{"rle": rle_json(4, 4, [0, 15]), "score": 0.5}]},  # bad counts
        {"candidates": "nope"},
        {},
    ],
)
def test_remote_segment_malformed(payload):
    client = RemoteSegmenter(
        remote_config("segmenter"), FakeTransport([HttpResponse(200, payload)]), sleep=lambda s: None
    )
    with pytest.raises(MalformedResponse):
        client.segment(solid_image(4, 4), SegPrompt(points=(LabeledPoint(1, 1),)))


def test_remote_segment_everything_accepts_empty():
    client = RemoteSegmenter(
        remote_config("segmenter"),
        FakeTransport([HttpResponse(200, {"masks": []})]),
        sleep=lambda s: None,
    )
    assert client.segment_everything(solid_image(4, 4)) == []


def test_remote_segment_everything_dims_mismatch():
    client = RemoteSegmenter(
        remote_config("segmenter"),
        FakeTransport([HttpResponse(200, {"masks": [{"rle": rle_json(3, 3, [9])}]})]),
        sleep=lambda s: None,
    )
    with pytest.raises(MalformedResponse):
        client.segment_everything(solid_image(4, 4))


def test_remote_segmenter_hull_box_forwarding():
    prompt = SegPrompt(points=(LabeledPoint(1, 1),), box=BoxRegion(0, 0, 2, 2))
    transport = FakeTransport([HttpResponse(200, {"candidates": [{"rle": rle_json(4, 4, [0, 16]), "score": 0.5}]})])
    client = RemoteSegmenter(remote_config("segmenter"), transport, sleep=lambda s: None)
    client.segment(solid_image(4, 4), prompt)
    assert json.loads(transport.calls[0][1])["box"] == [0, 0, 2, 2]

    no_hull = BackendConfig(
        kind="segmenter",
        mode="remote",
        endpoint="http://backend.test",
        forward_hull_box=False,
    )
    transport2 = FakeTransport([HttpResponse(200, {"candidates": [{"rle": rle_json(4, 4, [0, 16]), "score": 0.5}]})])
    RemoteSegmenter(no_hull, transport2, sleep=lambda s: None).segment(solid_image(4, 4), prompt)
    assert json.loads(transport2.calls[0][1])["box"] is None


def test_remote_caption_empty_text():
    client = RemoteCaptioner(
        remote_config(), FakeTransport([HttpResponse(200, {"text": "  "})]), sleep=lambda s: None
    )
    with pytest.raises(EmptyCaption):
        client.caption(solid_image(4, 4), "")


def test_remote_refiner_refusal():
    client = RemoteRefiner(
        remote_config("refiner"),
        FakeTransport([HttpResponse(200, {"text": "I cannot help with that"})]),
        sleep=lambda s: None,
    )
    with pytest.raises(Refusal):
        client.refine("prompt")


def test_remote_vqa_roundtrip():
    client = RemoteVqa(
        remote_config("vqa"), FakeTransport([HttpResponse(200, {"answer": "blue"})]), sleep=lambda s: None
    )
    assert client.vqa(solid_image(4, 4), "color?") == "blue"


def test_remote_ocr_validates_confidence():
    bad = {"lines": [{"text": "EXIT", "box": [0, 0, 1, 1], "conf": 1.7}]}
    client = RemoteOcr(
        remote_config("ocr"), FakeTransport([HttpResponse(200, bad)]), sleep=lambda s: None
    )
    with pytest.raises(MalformedResponse):
        client.ocr(solid_image(4, 4))


def test_remote_ocr_parses_lines():
    good = {"lines": [{"text": "EXIT", "box": [0, 0, 10, 4], "conf": 0.88}]}
    client = RemoteOcr(
        remote_config("ocr"), FakeTransport([HttpResponse(200, good)]), sleep=lambda s: None
    )
    (line,) = client.ocr(solid_image(16, 16))
    assert (line.text, line.box, line.confidence) == ("EXIT", BoxRegion(0, 0, 10, 4), 0.88)
