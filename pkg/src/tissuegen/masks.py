"""Binary tissue-mask primitives: thresholding, morphology, statistics, augmentation.

Masks are 2-D uint8 arrays of {0, 1} where 1 = tissue and 0 = air. All
morphology treats pixels outside the image frame as air; outputs are cropped
back to the frame.
"""
from __future__ import annotations

import io
import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

__all__ = [
    "BinaryMask",
    "StructuringElement",
    "AugmentPolicy",
    "binarize_grayscale",
    "erode",
    "dilate",
    "opening",
    "closing",
    "coarsen",
    "tissue_fraction",
    "perimeter",
    "augment",
    "mask_to_png_bytes",
    "mask_from_png_bytes",
    "write_mask_png",
    "read_mask_png",
]

OPEN_KERNEL = (5, 5)
CLOSE_KERNEL = (10, 10)


@dataclass(frozen=True)
class BinaryMask:
    """2-D bitplane, 1 = tissue, 0 = air."""

    plane: np.ndarray

    def __post_init__(self):
        plane = np.asarray(self.plane)
        if plane.ndim != 2 or plane.size == 0:
            raise ValueError(f"mask plane must be non-empty 2-D, got shape {plane.shape}")
        if not np.isin(plane, (0, 1)).all():
            raise ValueError("mask plane must contain only 0 and 1")
        object.__setattr__(self, "plane", plane.astype(np.uint8))

    @property
    def height(self) -> int:
        return self.plane.shape[0]

    @property
    def width(self) -> int:
        return self.plane.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.plane.shape

    def __eq__(self, other) -> bool:
        return isinstance(other, BinaryMask) and np.array_equal(self.plane, other.plane)

    def complement(self) -> "BinaryMask":
        return BinaryMask(1 - self.plane)


@dataclass(frozen=True)
class StructuringElement:
    """Rectangular all-ones neighborhood, anchored at (h//2, w//2)."""

    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("structuring element dims must be >= 1")

    @property
    def anchor(self) -> tuple[int, int]:
        return self.height // 2, self.width // 2


def _check_se_fits(mask: BinaryMask, se: StructuringElement):
    if se.height > mask.height or se.width > mask.width:
        raise ValueError(
            f"structuring element {se.height}x{se.width} larger than mask "
            f"{mask.height}x{mask.width}"
        )


def binarize_grayscale(image: np.ndarray, threshold: int) -> BinaryMask:
    """Threshold an 8-bit grayscale image: intensity < threshold is tissue.

    Bright pixels (>= threshold) are air; the threshold itself belongs to the
    air side.
    """
    if not 0 <= threshold <= 255:
        raise ValueError(f"threshold must be in [0, 255], got {threshold}")
    image = np.asarray(image)
    if image.ndim != 2 or image.size == 0:
        raise ValueError(f"expected non-empty 2-D grayscale image, got shape {image.shape}")
    return BinaryMask((image < threshold).astype(np.uint8))


def _window_reduce(plane: np.ndarray, se: StructuringElement, anchor_row: int,
                   anchor_col: int, reduce) -> np.ndarray:
    pad = (
        (anchor_row, se.height - 1 - anchor_row),
        (anchor_col, se.width - 1 - anchor_col),
    )
    padded = np.pad(plane, pad, mode="constant", constant_values=0)
    windows = sliding_window_view(padded, (se.height, se.width))
    return reduce(windows, axis=(2, 3)).astype(np.uint8)


def erode(mask: BinaryMask, se: StructuringElement) -> BinaryMask:
    """Output pixel is 1 iff every pixel under the SE is 1; outside the frame is air."""
    _check_se_fits(mask, se)
    ar, ac = se.anchor
    return BinaryMask(_window_reduce(mask.plane, se, ar, ac, np.min))


def dilate(mask: BinaryMask, se: StructuringElement) -> BinaryMask:
    """Max over the SE neighborhood; outside the frame is air.

    The SE is mirrored about its anchor (Minkowski sum), so erode/dilate form
    an adjunction and opening/closing keep their algebraic properties for
    even kernels too. Identical to the plain window max for odd kernels.
    """
    _check_se_fits(mask, se)
    ar, ac = se.anchor
    return BinaryMask(
        _window_reduce(mask.plane, se, se.height - 1 - ar, se.width - 1 - ac, np.max)
    )


def opening(mask: BinaryMask, se: StructuringElement) -> BinaryMask:
    """Erosion followed by dilation. Removes components smaller than the SE."""
    return dilate(erode(mask, se), se)


def closing(mask: BinaryMask, se: StructuringElement) -> BinaryMask:
    """Dilation followed by erosion. Fills gaps smaller than the SE.

    Computed on an air-padded canvas so that dilated pixels beyond the frame
    survive into the erosion step; this keeps closing extensive at borders
    (the frame crop alone would eat a border ring).
    """
    _check_se_fits(mask, se)
    mh, mw = se.height, se.width
    canvas = np.pad(mask.plane, ((mh, mh), (mw, mw)), mode="constant", constant_values=0)
    closed = erode(dilate(BinaryMask(canvas), se), se)
    return BinaryMask(closed.plane[mh:mh + mask.height, mw:mw + mask.width])


def coarsen(fine: BinaryMask) -> BinaryMask:
    """Two-stage coarse-mask construction: 5x5 opening then 10x10 closing."""
    if fine.height < CLOSE_KERNEL[0] or fine.width < CLOSE_KERNEL[1]:
        raise ValueError(
            f"mask {fine.height}x{fine.width} smaller than the "
            f"{CLOSE_KERNEL[0]}x{CLOSE_KERNEL[1]} closing kernel"
        )
    opened = opening(fine, StructuringElement(*OPEN_KERNEL))
    return closing(opened, StructuringElement(*CLOSE_KERNEL))


def tissue_fraction(mask: BinaryMask) -> float:
    """Fraction of tissue pixels in [0, 1]."""
    return float(mask.plane.sum()) / mask.plane.size


def perimeter(mask: BinaryMask) -> int:
    """Count of tissue-air 4-neighbor edges, frame border counted as air."""
    p = np.pad(mask.plane, 1, mode="constant", constant_values=0).astype(np.int16)
    core = p[1:-1, 1:-1]
    edges = 0
    for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        shifted = p[1 + dr:p.shape[0] - 1 + dr, 1 + dc:p.shape[1] - 1 + dc]
        edges += int(((core == 1) & (shifted == 0)).sum())
    return edges


@dataclass(frozen=True)
class AugmentPolicy:
    """Label-preserving, binary-safe transform ranges.

    Defaults: horizontal/vertical flips, integer translations up to +-10% of
    each dimension (air fill), scale jitter in [0.9, 1.1] with
    nearest-neighbor resampling then re-binarization.
    """

    flip_h_prob: float = 0.5
    flip_v_prob: float = 0.5
    max_shift_frac: float = 0.1
    scale_range: tuple[float, float] = (0.9, 1.1)

    @staticmethod
    def identity() -> "AugmentPolicy":
        return AugmentPolicy(flip_h_prob=0.0, flip_v_prob=0.0, max_shift_frac=0.0,
                             scale_range=(1.0, 1.0))


def _scale_nearest(plane: np.ndarray, scale: float) -> np.ndarray:
    if scale == 1.0:
        return plane
    h, w = plane.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows = np.rint((np.arange(h) - cy) / scale + cy).astype(np.int64)
    cols = np.rint((np.arange(w) - cx) / scale + cx).astype(np.int64)
    valid_r = (rows >= 0) & (rows < h)
    valid_c = (cols >= 0) & (cols < w)
    out = np.zeros_like(plane)
    rr = rows[valid_r]
    cc = cols[valid_c]
    out[np.ix_(valid_r, valid_c)] = plane[np.ix_(rr, cc)]
    return out


def _translate(plane: np.ndarray, dy: int, dx: int) -> np.ndarray:
    h, w = plane.shape
    out = np.zeros_like(plane)
    src_r = slice(max(0, -dy), min(h, h - dy))
    src_c = slice(max(0, -dx), min(w, w - dx))
    dst_r = slice(max(0, dy), min(h, h + dy))
    dst_c = slice(max(0, dx), min(w, w + dx))
    out[dst_r, dst_c] = plane[src_r, src_c]
    return out


def augment(mask: BinaryMask, seed: int, count: int,
            policy: AugmentPolicy | None = None) -> list[BinaryMask]:
    """Deterministic list of `count` augmented variants of `mask`."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    policy = policy or AugmentPolicy()
    rng = np.random.default_rng(seed)
    max_dy = int(policy.max_shift_frac * mask.height)
    max_dx = int(policy.max_shift_frac * mask.width)
    out = []
    for _ in range(count):
        flip_h = rng.random() < policy.flip_h_prob
        flip_v = rng.random() < policy.flip_v_prob
        scale = float(rng.uniform(*policy.scale_range))
        dy = int(rng.integers(-max_dy, max_dy + 1))
        dx = int(rng.integers(-max_dx, max_dx + 1))
        plane = _scale_nearest(mask.plane, scale)
        if flip_h:
            plane = plane[:, ::-1]
        if flip_v:
            plane = plane[::-1, :]
        plane = _translate(plane, dy, dx)
        out.append(BinaryMask(plane.copy()))
    return out


def _encode_png(plane_u8: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(plane_u8, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def mask_to_png_bytes(mask: BinaryMask) -> bytes:
    """8-bit grayscale PNG with tissue = 255, air = 0."""
    return _encode_png(mask.plane * np.uint8(255))


def mask_from_png_bytes(data: bytes) -> BinaryMask:
    """Decode a grayscale PNG; values other than {0, 255} binarize at 128 with a warning."""
    img = Image.open(io.BytesIO(data)).convert("L")
    arr = np.asarray(img)
    if not np.isin(arr, (0, 255)).all():
        warnings.warn("mask PNG contains values other than {0, 255}; binarizing at 128")
    return BinaryMask((arr >= 128).astype(np.uint8))


def write_mask_png(mask: BinaryMask, path) -> None:
    with open(path, "wb") as f:
        f.write(mask_to_png_bytes(mask))


def read_mask_png(path) -> BinaryMask:
    with open(path, "rb") as f:
        return mask_from_png_bytes(f.read())
