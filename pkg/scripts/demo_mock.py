#!/usr/bin/env python3
"""Offline walkthrough of the whole engine on a synthetic image.

Runs the caption pipeline (with and without chain-of-thought), a scripted
chat turn, and paragraph captioning, all against the deterministic mocks.
"""

import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from capengine.backends import ScriptedRefiner, mock_backends
from capengine.chat import chat_turn, start_session
from capengine.geometry import VisualControl, raster_dims
from capengine.paragraph import caption_everything
from capengine.pipeline import CaptionRequest, caption_object
from capengine.prompts import LanguageControls


def synthetic_image(w=100, h=100):
    xs = np.arange(w, dtype=np.uint16)
    ys = np.arange(h, dtype=np.uint16)
    r = np.broadcast_to((xs * 7 % 256)[None, :], (h, w))
    g = np.broadcast_to((ys * 11 % 256)[:, None], (h, w))
    b = (xs[None, :] + ys[:, None]) * 3 % 256
    return np.stack([r, g, b], axis=-1).astype(np.uint8)


def main():
    image = synthetic_image()
    backends = mock_backends()

    print("== caption with visual chain-of-thought ==")
    request = CaptionRequest(
        control=VisualControl.click(50, 50),
        controls=LanguageControls(sentiment="positive", length=12),
    )
    result = caption_object(image, request, backends)
    print(f"  bbox     {result.bbox}")
    print(f"  category {result.category}")
    print(f"  raw      {result.raw_caption}")
    print(f"  refined  {result.refined_caption}")
    print(f"  steps    {[s.name for s in result.trace]}")

    print("== chat about the selected object ==")
    script = ScriptedRefiner(
        ["Action: vqa\\nAction Input: what shade is it?", "Final Answer: a mock shade."]
    )
    session = start_session(
        "demo", raster_dims(image), result.mask, result.raw_caption
    )
    reply, tool_calls, _ = chat_turn(
        session, "tell me more", image, mock_backends(refiner=script)
    )
    for call in tool_calls:
        print(f"  tool     {call.tool}({call.input}) -> {call.output}")
    print(f"  reply    {reply}")

    print("== paragraph captioning ==")
    paragraph = caption_everything(image, backends)
    for dense in paragraph.dense:
        print(f"  region   {dense.mask_id} area={dense.area} {dense.caption}")
    print(f"  text     {paragraph.paragraph}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
