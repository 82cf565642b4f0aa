"""Visual-control normalization and binary-mask post-processing.

Everything here is a pure function over immutable values: controls become
segmenter prompts, masks get measured, cropped, whitened, encoded to the
row-major RLE wire form, and deduplicated for segment-everything output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Sequence

import numpy as np

from .errors import DimsMismatch, EmptyControl, EmptyMask, InvalidRle, OutOfBounds

# Normative defaults for this engine.
TRAJECTORY_POINTS = 8
MARGIN_RATIO = 0.15
MIN_AREA_RATIO = 0.0005
IOU_THRESHOLD = 0.9


def round_half_away(value: float) -> int:
    """Round to nearest integer, halves away from zero (2.5 -> 3, -2.5 -> -3)."""
    if value >= 0:
        return int(math.floor(value + 0.5))
    return int(math.ceil(value - 0.5))


@dataclass(frozen=True)
class ImageDims:
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image dims must be positive, got {self.width}x{self.height}")

    @property
    def pixels(self) -> int:
        return self.width * self.height


class PointLabel(IntEnum):
    NEGATIVE = 0
    POSITIVE = 1


@dataclass(frozen=True)
class LabeledPoint:
    x: int
    y: int
    label: PointLabel = PointLabel.POSITIVE


@dataclass(frozen=True)
class BoxRegion:
    """Axis-aligned box with inclusive pixel corners.

    Ordering (x0 <= x1, y0 <= y1) and in-bounds coordinates are established
    by normalize_control; raw user boxes may arrive inverted.
    """

    x0: int
    y0: int
    x1: int
    y1: int

    def ordered(self) -> "BoxRegion":
        x0, x1 = sorted((self.x0, self.x1))
        y0, y1 = sorted((self.y0, self.y1))
        return BoxRegion(x0, y0, x1, y1)

    def clamped(self, dims: ImageDims) -> "BoxRegion":
        return BoxRegion(
            _clamp(self.x0, dims.width),
            _clamp(self.y0, dims.height),
            _clamp(self.x1, dims.width),
            _clamp(self.y1, dims.height),
        )


@dataclass(frozen=True)
class Trajectory:
    points: tuple[tuple[float, float], ...]

    def __init__(self, points: Iterable[Sequence[float]]):
        object.__setattr__(
            self, "points", tuple((float(x), float(y)) for x, y in points)
        )


@dataclass(frozen=True)
class VisualControl:
    """Tagged union of the three spatial selection gestures."""

    points: tuple[LabeledPoint, ...] | None = None
    box: BoxRegion | None = None
    trajectory: Trajectory | None = None

    def __post_init__(self) -> None:
        populated = sum(v is not None for v in (self.points, self.box, self.trajectory))
        if populated != 1:
            raise ValueError(f"exactly one control variant required, got {populated}")

    @classmethod
    def from_points(cls, points: Iterable[LabeledPoint]) -> "VisualControl":
        return cls(points=tuple(points))

    @classmethod
    def click(cls, x: int, y: int, label: PointLabel = PointLabel.POSITIVE) -> "VisualControl":
        return cls(points=(LabeledPoint(x, y, label),))

    @classmethod
    def from_box(cls, box: BoxRegion) -> "VisualControl":
        return cls(box=box)

    @classmethod
    def from_trajectory(cls, points: Iterable[Sequence[float]]) -> "VisualControl":
        return cls(trajectory=Trajectory(points))


@dataclass(frozen=True)
class SegPrompt:
    """Unified segmenter prompt: labeled points and/or a box, all in bounds."""

    points: tuple[LabeledPoint, ...] = ()
    box: BoxRegion | None = None

    def __post_init__(self) -> None:
        if not self.points and self.box is None:
            raise ValueError("segmenter prompt needs points or a box")


class BitMask:
    """Dense binary mask: row-major bool array of exactly width*height bits."""

    __slots__ = ("dims", "bits")

    def __init__(self, dims: ImageDims, bits: np.ndarray | Sequence[int]):
        arr = np.asarray(bits, dtype=bool).reshape(-1)
        if arr.size != dims.pixels:
            raise ValueError(
                f"bit count {arr.size} does not match {dims.width}x{dims.height}"
            )
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        self.dims = dims
        self.bits = arr

    @classmethod
    def zeros(cls, dims: ImageDims) -> "BitMask":
        return cls(dims, np.zeros(dims.pixels, dtype=bool))

    @classmethod
    def ones(cls, dims: ImageDims) -> "BitMask":
        return cls(dims, np.ones(dims.pixels, dtype=bool))

    @classmethod
    def from_grid(cls, grid: np.ndarray | Sequence[Sequence[int]]) -> "BitMask":
        arr = np.asarray(grid, dtype=bool)
        if arr.ndim != 2:
            raise ValueError("grid must be 2-dimensional")
        h, w = arr.shape
        return cls(ImageDims(w, h), arr.reshape(-1))

    def grid(self) -> np.ndarray:
        return self.bits.reshape(self.dims.height, self.dims.width)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BitMask):
            return NotImplemented
        return self.dims == other.dims and bool(np.array_equal(self.bits, other.bits))

    def __hash__(self) -> int:
        return hash((self.dims, self.bits.tobytes()))

    def __repr__(self) -> str:
        return f"BitMask({self.dims.width}x{self.dims.height}, area={int(self.bits.sum())})"


@dataclass(frozen=True)
class RleMask:
    """Run-length encoded mask: alternating runs starting with a zero-run.

    The leading count may be 0 (mask starts with a set bit); every other
    count must be positive and the counts must sum to width*height.
    """

    dims: ImageDims
    counts: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        if any(c < 0 for c in self.counts):
            raise InvalidRle("negative run length")
        if any(c == 0 for c in self.counts[1:]):
            raise InvalidRle("zero-length interior run")
        total = sum(self.counts)
        if total != self.dims.pixels:
            raise InvalidRle(
                f"counts sum {total} does not cover {self.dims.width}x{self.dims.height}"
            )

    @property
    def area(self) -> int:
        return sum(self.counts[1::2])

    def to_json(self) -> dict:
        """Wire/persistence form: {"w":W,"h":H,"counts":[...]}."""
        return {"w": self.dims.width, "h": self.dims.height, "counts": list(self.counts)}

    @classmethod
    def from_json(cls, obj: object) -> "RleMask":
        if not isinstance(obj, dict):
            raise InvalidRle("RLE payload must be an object")
        try:
            w = int(obj["w"])
            h = int(obj["h"])
            counts = [int(c) for c in obj["counts"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidRle(f"malformed RLE payload: {exc}") from exc
        if w < 1 or h < 1:
            raise InvalidRle("non-positive RLE dims")
        return cls(ImageDims(w, h), tuple(counts))


def _clamp(value: int, size: int) -> int:
    return min(max(int(value), 0), size - 1)


def resample_trajectory(traj: Trajectory, k: int) -> list[tuple[int, int]]:
    """Sample k points at uniform arc-length positions along the polyline.

    Endpoints are included for k >= 2; a single-point trajectory yields that
    point once regardless of k. Coordinates round half away from zero.
    """
    if not traj.points:
        raise EmptyControl("trajectory has no points")
    if k < 1:
        raise ValueError("k must be >= 1")
    pts = traj.points
    if len(pts) == 1:
        x, y = pts[0]
        return [(round_half_away(x), round_half_away(y))]

    cumulative = [0.0]
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        cumulative.append(cumulative[-1] + math.hypot(x1 - x0, y1 - y0))
    total = cumulative[-1]

    targets = [0.0] if k == 1 else [total * i / (k - 1) for i in range(k)]
    out: list[tuple[int, int]] = []
    seg = 0
    for t in targets:
        if total == 0.0 or t >= total:
            x, y = pts[0] if total == 0.0 else pts[-1]
        else:
            while seg < len(pts) - 2 and cumulative[seg + 1] <= t:
                seg += 1
            seg_len = cumulative[seg + 1] - cumulative[seg]
            frac = 0.0 if seg_len == 0.0 else (t - cumulative[seg]) / seg_len
            x = pts[seg][0] + frac * (pts[seg + 1][0] - pts[seg][0])
            y = pts[seg][1] + frac * (pts[seg + 1][1] - pts[seg][1])
        out.append((round_half_away(x), round_half_away(y)))
    return out


def normalize_control(
    control: VisualControl,
    dims: ImageDims,
    *,
    traj_points: int = TRAJECTORY_POINTS,
) -> SegPrompt:
    """Turn a user gesture into an in-bounds segmenter prompt.

    Points are clamped; boxes are corner-ordered and clamped; a trajectory
    becomes traj_points uniformly resampled positive points plus the hull box
    of the stroke (a one-point trajectory degrades to a plain click).
    """
    if control.points is not None:
        if not control.points:
            raise EmptyControl("control has no points")
        if not any(p.label == PointLabel.POSITIVE for p in control.points):
            raise EmptyControl("points control needs at least one positive point")
        clamped = tuple(
            LabeledPoint(_clamp(p.x, dims.width), _clamp(p.y, dims.height), p.label)
            for p in control.points
        )
        return SegPrompt(points=clamped)

    if control.box is not None:
        return SegPrompt(box=control.box.ordered().clamped(dims))

    assert control.trajectory is not None
    stroke = control.trajectory.points
    if not stroke:
        raise EmptyControl("trajectory has no points")
    sampled = resample_trajectory(control.trajectory, traj_points)
    points = tuple(
        LabeledPoint(_clamp(x, dims.width), _clamp(y, dims.height))
        for x, y in sampled
    )
    if len(stroke) == 1:
        return SegPrompt(points=points)
    xs = [round_half_away(x) for x, _ in stroke]
    ys = [round_half_away(y) for _, y in stroke]
    hull = BoxRegion(min(xs), min(ys), max(xs), max(ys)).clamped(dims)
    return SegPrompt(points=points, box=hull)


def mask_bbox(mask: BitMask) -> BoxRegion:
    """Tight inclusive bounding box over set bits."""
    idx = np.flatnonzero(mask.bits)
    if idx.size == 0:
        raise EmptyMask("mask has no set bits")
    w = mask.dims.width
    xs = idx % w
    ys = idx // w
    return BoxRegion(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))


def mask_area(mask: BitMask) -> int:
    return int(np.count_nonzero(mask.bits))


def mask_iou(a: BitMask, b: BitMask) -> float:
    """Intersection over union; 0.0 when both masks are empty."""
    if a.dims != b.dims:
        raise DimsMismatch(f"{a.dims} vs {b.dims}")
    union = int(np.count_nonzero(a.bits | b.bits))
    if union == 0:
        return 0.0
    inter = int(np.count_nonzero(a.bits & b.bits))
    return inter / union


def rle_encode(mask: BitMask) -> RleMask:
    """Row-major scan into alternating runs, leading zero-run first."""
    bits = mask.bits.view(np.int8)
    changes = np.flatnonzero(np.diff(bits))
    starts = np.concatenate(([0], changes + 1))
    ends = np.concatenate((changes + 1, [bits.size]))
    counts = (ends - starts).tolist()
    if bits[0] == 1:
        counts.insert(0, 0)
    return RleMask(mask.dims, tuple(counts))


def rle_decode(rle: RleMask) -> BitMask:
    """Inverse of rle_encode; RleMask construction already validated counts."""
    values = np.zeros(len(rle.counts), dtype=bool)
    values[1::2] = True
    bits = np.repeat(values, np.asarray(rle.counts, dtype=np.int64))
    return BitMask(rle.dims, bits)


def crop_window(box: BoxRegion, margin_ratio: float, dims: ImageDims) -> BoxRegion:
    """Expand each side outward by round(margin_ratio * side extent), clamped."""
    if margin_ratio < 0:
        raise ValueError("margin_ratio must be non-negative")
    dx = round_half_away(margin_ratio * (box.x1 - box.x0))
    dy = round_half_away(margin_ratio * (box.y1 - box.y0))
    return BoxRegion(
        max(0, box.x0 - dx),
        max(0, box.y0 - dy),
        min(dims.width - 1, box.x1 + dx),
        min(dims.height - 1, box.y1 + dy),
    )


def raster_dims(image: np.ndarray) -> ImageDims:
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError("expected an RGB8 raster of shape (h, w, 3)")
    return ImageDims(int(image.shape[1]), int(image.shape[0]))


def crop_image(image: np.ndarray, window: BoxRegion) -> np.ndarray:
    """Copy the inclusive window out of an RGB8 raster."""
    dims = raster_dims(image)
    if window.x0 > window.x1 or window.y0 > window.y1:
        raise OutOfBounds(f"inverted window {window}")
    if window.x0 < 0 or window.y0 < 0 or window.x1 >= dims.width or window.y1 >= dims.height:
        raise OutOfBounds(f"window {window} outside {dims.width}x{dims.height}")
    return image[window.y0 : window.y1 + 1, window.x0 : window.x1 + 1].copy()


def whiten_background(image: np.ndarray, mask: BitMask) -> np.ndarray:
    """Keep masked pixels, paint everything else white."""
    dims = raster_dims(image)
    if dims != mask.dims:
        raise DimsMismatch(f"image {dims} vs mask {mask.dims}")
    keep = mask.grid()[:, :, None]
    return np.where(keep, image, np.uint8(255)).astype(np.uint8)


def filter_masks(
    candidates: Sequence[BitMask],
    min_area_ratio: float = MIN_AREA_RATIO,
    iou_threshold: float = IOU_THRESHOLD,
) -> list[BitMask]:
    """Greedy dedup: area-descending order, drop tiny masks and near-duplicates.

    A candidate is kept iff its area reaches min_area_ratio of the image and
    its IoU with every already-kept mask stays below iou_threshold. Ties in
    area keep the earlier input index first.
    """
    if min_area_ratio < 0 or iou_threshold < 0:
        raise ValueError("thresholds must be non-negative")
    if not candidates:
        return []
    dims = candidates[0].dims
    for m in candidates[1:]:
        if m.dims != dims:
            raise DimsMismatch(f"{m.dims} vs {dims}")
    floor = min_area_ratio * dims.pixels
    areas = [mask_area(m) for m in candidates]
    order = sorted(range(len(candidates)), key=lambda i: (-areas[i], i))
    kept: list[BitMask] = []
    for i in order:
        if areas[i] < floor:
            continue
        if any(mask_iou(candidates[i], k) >= iou_threshold for k in kept):
            continue
        kept.append(candidates[i])
    return kept
