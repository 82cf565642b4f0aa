#!/usr/bin/env python3
"""Manual smoke test against real backend endpoints (not run in CI).

Drives each configured remote backend once and reports protocol
compatibility: response schemas must parse and validate. Model output
quality is explicitly not asserted.

Usage:
    python3 scripts/smoke_remote.py --image photo.jpg --config service.conf
"""

import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from capengine.backends import remote_backends
from capengine.errors import CapengineError
from capengine.geometry import SegPrompt, LabeledPoint, raster_dims
from capengine.service import load_service_config


def load_image(path):
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--image", required=True)
    parser.add_argument("--config", required=True)
    args = parser.parse_args()

    config = load_service_config(args.config)
    backends = remote_backends(config.backends)
    image = load_image(args.image)
    dims = raster_dims(image)
    print(f"image {dims.width}x{dims.height}")

    checks = []

    def check(name, fn):
        try:
            summary = fn()
        except CapengineError as exc:
            checks.append((name, f"FAIL: {exc}"))
        except Exception as exc:  # noqa: BLE001 - smoke report, keep going
            checks.append((name, f"FAIL: {type(exc).__name__}: {exc}"))
        else:
            checks.append((name, f"ok ({summary})"))

    center = LabeledPoint(dims.width // 2, dims.height // 2)
    check(
        "segment",
        lambda: f"{len(backends.segmenter.segment(image, SegPrompt(points=(center,))))} candidates",
    )
    check(
        "segment_everything",
        lambda: f"{len(backends.segmenter.segment_everything(image))} masks",
    )
    check("caption", lambda: repr(backends.captioner.caption(image, ""))[:60])
    check(
        "refine",
        lambda: repr(
            backends.refiner.refine(
                "Revise the following image caption so that it keeps a neutral, factual tone. "
                "Reply with only the revised caption.\nCaption: a smoke test image"
            )
        )[:60],
    )
    check("vqa", lambda: repr(backends.vqa.vqa(image, "What is in this image?"))[:60])
    check("ocr", lambda: f"{len(backends.ocr.ocr(image))} lines")

    width = max(len(name) for name, _ in checks)
    failed = False
    for name, status in checks:
        print(f"  {name:<{width}}  {status}")
        failed = failed or status.startswith("FAIL")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
