import io

import numpy as np
import pytest


def _encode(array, fmt="PNG"):
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(array, mode="RGB").save(buf, format=fmt)
    return buf.getvalue()


@pytest.fixture
def solid_png():
    return _encode(np.full((100, 100, 3), 128, dtype=np.uint8))


@pytest.fixture
def tiny_png():
    return _encode(np.full((1, 1, 3), 10, dtype=np.uint8))


@pytest.fixture
def gradient_png():
    xs = np.arange(100, dtype=np.uint16)
    ys = np.arange(100, dtype=np.uint16)
    r = np.broadcast_to((xs * 7 % 256)[None, :], (100, 100))
    g = np.broadcast_to((ys * 11 % 256)[:, None], (100, 100))
    b = (xs[None, :] + ys[:, None]) * 3 % 256
    return _encode(np.stack([r, g, b], axis=-1).astype(np.uint8))
