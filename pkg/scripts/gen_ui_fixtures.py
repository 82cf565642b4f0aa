#!/usr/bin/env python3
"""Regenerate the RLE fixtures shared with the web UI.

The browser client must decode masks bit-for-bit like the engine; these
fixtures freeze that agreement. Output goes to frontend/tests/fixtures/ and
is checked in; rerun only when the fixture shapes change.
"""

import json
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from capengine.geometry import BitMask, ImageDims, rle_encode

OUT_DIR = Path(__file__).resolve().parent.parent / "frontend" / "tests" / "fixtures"


def fixture_cases():
    yield "all_zeros_2x2", BitMask.zeros(ImageDims(2, 2))
    yield "all_ones_2x2", BitMask.ones(ImageDims(2, 2))
    yield "diagonal_2x2", BitMask.from_grid([[1, 0], [0, 1]])

    grid = np.zeros((100, 100), dtype=bool)
    grid[38:63, 38:63] = True
    yield "square_100x100", BitMask(ImageDims(100, 100), grid.reshape(-1))

    rng = np.random.RandomState(1234)
    noise = rng.rand(40, 60) < 0.37
    yield "noise_60x40", BitMask.from_grid(noise)


def main():
    OUT_DIR.mkdir(parents=True, exist_ok=True)
    cases = []
    for name, mask in fixture_cases():
        rle = rle_encode(mask)
        cases.append(
            {
                "name": name,
                "rle": rle.to_json(),
                "bits": "".join("1" if b else "0" for b in mask.bits),
            }
        )
    path = OUT_DIR / "rle_fixtures.json"
    path.write_text(json.dumps(cases, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {path} ({len(cases)} cases)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
