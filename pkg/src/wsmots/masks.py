"""Mask, box and run-length primitives.

Masks are plain numpy arrays: ``bool`` for binary masks, ``float`` in
``[0, 1]`` for probabilistic ones. Boxes are half-open pixel rectangles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import check_binary_mask, check_prob_mask

__all__ = [
    "ROI_SIZE",
    "CRF_SIZE",
    "BBox",
    "RleMask",
    "RleError",
    "mask_iou",
    "bbox_iou",
    "rle_encode",
    "rle_decode",
    "rle_area",
    "rle_to_bbox",
    "resize_bilinear",
    "crop_and_rasterize",
    "roi_cell_centers",
]

ROI_SIZE = 28
CRF_SIZE = 128


class RleError(ValueError):
    """Malformed or inconsistent run-length string."""


@dataclass(frozen=True)
class BBox:
    """Half-open box ``[x0, x1) x [y0, y1)`` in pixel coordinates."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValueError(f"degenerate box {self.as_list()}")

    @classmethod
    def from_list(cls, values) -> "BBox":
        x0, y0, x1, y1 = (float(v) for v in values)
        return cls(x0, y0, x1, y1)

    def as_list(self) -> list[float]:
        return [self.x0, self.y0, self.x1, self.y1]

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    def contains(self, x, y):
        """Vectorized point-in-box test (half-open)."""
        x = np.asarray(x)
        y = np.asarray(y)
        return (x >= self.x0) & (x < self.x1) & (y >= self.y0) & (y < self.y1)


@dataclass(frozen=True)
class RleMask:
    """COCO-style compressed RLE: image size plus the ASCII counts string."""

    height: int
    width: int
    counts: str

    def decode(self) -> np.ndarray:
        return rle_decode(self)


def mask_iou(a, b) -> float:
    """Intersection over union of two binary masks; 0 when both are empty."""
    a = check_binary_mask(a, "a")
    b = check_binary_mask(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def bbox_iou(a: BBox, b: BBox) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


# -- run-length coding -------------------------------------------------------

def _runs(mask: np.ndarray) -> list[int]:
    flat = mask.ravel(order="F").astype(np.int8)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs.insert(0, 0)
    return runs


def _compress(runs: list[int]) -> str:
    out = bytearray()
    for i, run in enumerate(runs):
        x = run - runs[i - 2] if i > 2 else run
        more = True
        while more:
            c = x & 0x1F
            x >>= 5
            more = x != -1 if c & 0x10 else x != 0
            if more:
                c |= 0x20
            out.append(c + 48)
    return out.decode("ascii")


def _decompress(counts: str) -> list[int]:
    data = counts.encode("ascii") if isinstance(counts, str) else bytes(counts)
    runs: list[int] = []
    p = 0
    while p < len(data):
        x = 0
        k = 0
        more = True
        while more:
            if p >= len(data):
                raise RleError("truncated run-length string")
            c = data[p] - 48
            if not 0 <= c < 64:
                raise RleError(f"invalid character {chr(data[p])!r} at offset {p}")
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            p += 1
            k += 1
            if not more and c & 0x10:
                x |= -1 << (5 * k)
        if len(runs) > 2:
            x += runs[-2]
        runs.append(x)
    return runs


def rle_encode(mask) -> RleMask:
    """Encode a binary mask column-major into compressed COCO RLE."""
    mask = check_binary_mask(mask)
    h, w = mask.shape
    return RleMask(h, w, _compress(_runs(mask)))


def rle_decode(rle: RleMask) -> np.ndarray:
    runs = _decompress(rle.counts)
    n = rle.height * rle.width
    if any(r < 0 for r in runs):
        raise RleError("negative run length")
    if sum(runs) != n:
        raise RleError(f"run lengths sum to {sum(runs)}, expected {rle.height}x{rle.width}={n}")
    values = np.zeros(len(runs), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, runs)
    return flat.reshape((rle.height, rle.width), order="F")


def rle_area(rle: RleMask) -> int:
    return int(sum(_decompress(rle.counts)[1::2]))


def rle_to_bbox(rle: RleMask) -> BBox | None:
    """Tight half-open box around the foreground, or None for an empty mask."""
    m = rle_decode(rle)
    ys, xs = np.nonzero(m)
    if ys.size == 0:
        return None
    return BBox(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


# -- resampling --------------------------------------------------------------

def _corner_aligned(n_in: int, n_out: int) -> np.ndarray:
    if n_out == 1 or n_in == 1:
        return np.zeros(n_out)
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def resize_bilinear(mask, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with corner-aligned sampling (first/last pixels map onto each other)."""
    m = check_prob_mask(mask)
    if out_h < 1 or out_w < 1:
        raise ValueError("target size must be positive")
    h, w = m.shape
    ys = _corner_aligned(h, out_h)
    xs = _corner_aligned(w, out_w)
    y0 = np.minimum(np.floor(ys).astype(int), h - 1)
    x0 = np.minimum(np.floor(xs).astype(int), w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = m[np.ix_(y0, x0)] * (1 - wx) + m[np.ix_(y0, x1)] * wx
    bot = m[np.ix_(y1, x0)] * (1 - wx) + m[np.ix_(y1, x1)] * wx
    out = top * (1 - wy) + bot * wy
    # guard against rounding drift outside the input range
    return np.clip(out, m.min(), m.max())


def roi_cell_centers(box: BBox, size: int = ROI_SIZE) -> tuple[np.ndarray, np.ndarray]:
    """Frame coordinates (x, y) of the centers of a ``size x size`` grid laid over ``box``."""
    frac = (np.arange(size) + 0.5) / size
    cx = box.x0 + frac * box.width
    cy = box.y0 + frac * box.height
    return np.meshgrid(cx, cy)


def crop_and_rasterize(frame_mask, box: BBox, size: int = ROI_SIZE) -> np.ndarray:
    """Nearest-neighbour sample of ``frame_mask`` at the ROI grid cell centers.

    Cells whose center falls outside the frame read as background.
    """
    m = check_binary_mask(frame_mask, "frame_mask")
    h, w = m.shape
    if box.x1 <= 0 or box.y1 <= 0 or box.x0 >= w or box.y0 >= h:
        raise ValueError(f"box {box.as_list()} lies outside the {h}x{w} frame")
    cx, cy = roi_cell_centers(box, size)
    px = np.floor(cx).astype(int)
    py = np.floor(cy).astype(int)
    inside = (px >= 0) & (px < w) & (py >= 0) & (py < h)
    out = np.zeros((size, size), dtype=bool)
    out[inside] = m[py[inside], px[inside]]
    return out
