"""Image decoding, grayscale conversion, trinarization and head segmentation.

Input images are quantized into three ordered intensity classes (tone 0
darkest, tone 2 lightest) by an exhaustive two-threshold Otsu search; the
sperm head is then the largest connected non-background region, where the
background class is whichever tone dominates the image border.  All
functions are pure and safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import (
    DegenerateInputError,
    DimensionError,
    EmptyRegionError,
    SegmentationError,
)

_EIGHT_CONN = np.ones((3, 3), dtype=bool)
_FOUR_CONN = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class GrayImage:
    """8-bit single-channel raster; `pixels` is (height, width) uint8."""

    pixels: np.ndarray

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 2 or p.shape[0] < 1 or p.shape[1] < 1:
            raise DimensionError(f"grayscale image must be 2-D and non-empty, got shape {p.shape}")
        if p.dtype != np.uint8:
            raise DimensionError(f"grayscale image must be uint8, got {p.dtype}")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class TrinaryImage:
    """Per-pixel tone class in {0, 1, 2}, ordered darkest to lightest."""

    classes: np.ndarray
    thresholds: tuple[int, int]

    @property
    def width(self) -> int:
        return self.classes.shape[1]

    @property
    def height(self) -> int:
        return self.classes.shape[0]


@dataclass(frozen=True)
class BinaryMask:
    """Boolean head mask: one 8-connected component, interior holes filled."""

    bits: np.ndarray

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def area(self) -> int:
        return int(self.bits.sum())


def to_grayscale(rgb: np.ndarray) -> GrayImage:
    """Convert an 8-bit RGB raster with ITU-R 601 luma weights.

    Per-pixel luminance is round(0.299 R + 0.587 G + 0.114 B), clamped
    to [0, 255].
    """
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DimensionError(f"expected (H, W, 3) raster, got shape {rgb.shape}")
    if rgb.shape[0] < 1 or rgb.shape[1] < 1:
        raise DimensionError(f"zero-dimension image: shape {rgb.shape}")
    r = rgb[..., 0].astype(np.float64)
    g = rgb[..., 1].astype(np.float64)
    b = rgb[..., 2].astype(np.float64)
    luma = np.round(0.299 * r + 0.587 * g + 0.114 * b)
    return GrayImage(np.clip(luma, 0, 255).astype(np.uint8))


def _two_threshold_otsu(pixels: np.ndarray) -> tuple[int, int]:
    """Exhaustive search over all (t1, t2) pairs, 0 <= t1 < t2 <= 254.

    Maximizes between-class variance of the three classes; ties resolve
    to the lexicographically smallest pair.
    """
    hist = np.bincount(pixels.ravel(), minlength=256).astype(np.float64)
    w_cum = np.cumsum(hist)
    s_cum = np.cumsum(hist * np.arange(256, dtype=np.float64))
    n, s_total = w_cum[-1], s_cum[-1]

    t1 = np.arange(256)[:, None]
    t2 = np.arange(256)[None, :]
    w0, s0 = w_cum[t1], s_cum[t1]
    w1, s1 = w_cum[t2] - w_cum[t1], s_cum[t2] - s_cum[t1]
    w2, s2 = n - w_cum[t2], s_total - s_cum[t2]

    # Between-class variance up to a constant: sum of s_i^2 / w_i.
    def term(s, w):
        return np.where(w > 0, s * s / np.where(w > 0, w, 1.0), 0.0)

    score = term(s0, w0) + term(s1, w1) + term(s2, w2)
    score[(t1 >= t2) | (t2 > 254)] = -np.inf
    flat = int(np.argmax(score))  # row-major argmax = smallest (t1, t2) on ties
    return flat // 256, flat % 256


def trinarize(img: GrayImage) -> TrinaryImage:
    """Quantize into three tone classes via exhaustive two-threshold Otsu.

    Pixel p maps to 0 if p <= t1, 1 if t1 < p <= t2, 2 if p > t2.
    Raises DegenerateInputError when the image has fewer than 3 distinct
    intensities.
    """
    distinct = int(np.unique(img.pixels).size)
    if distinct < 3:
        raise DegenerateInputError(
            f"trinarization needs >= 3 distinct intensities, image has {distinct}"
        )
    t1, t2 = _two_threshold_otsu(img.pixels)
    classes = np.where(
        img.pixels <= t1, 0, np.where(img.pixels <= t2, 1, 2)
    ).astype(np.uint8)
    return TrinaryImage(classes, (t1, t2))


def _border_majority_class(classes: np.ndarray) -> int:
    border = np.concatenate(
        [classes[0, :], classes[-1, :], classes[1:-1, 0], classes[1:-1, -1]]
    )
    counts = np.bincount(border, minlength=3)
    return int(np.argmax(counts))


def segment_head(img: GrayImage) -> BinaryMask:
    """Segment the head as the largest non-background connected region.

    Background is the trinary class holding the most image-border pixels.
    The largest 8-connected foreground component is kept and its interior
    holes (4-connected background regions not touching the border) are
    filled.
    """
    try:
        tri = trinarize(img)
    except DegenerateInputError as exc:
        raise SegmentationError(f"segmentation failed: {exc}") from exc
    return segment_from_trinary(tri)


def segment_from_trinary(tri: TrinaryImage) -> BinaryMask:
    """Head segmentation on an already trinarized image."""
    background = _border_majority_class(tri.classes)
    foreground = tri.classes != background
    if not foreground.any():
        raise SegmentationError("segmentation failed: no foreground pixels")

    labels, count = ndimage.label(foreground, structure=_EIGHT_CONN)
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    mask = labels == int(np.argmax(sizes))

    # Fill holes: 4-connected off-mask regions that never reach the border.
    off_labels, _ = ndimage.label(~mask, structure=_FOUR_CONN)
    border_ids = np.unique(
        np.concatenate(
            [off_labels[0, :], off_labels[-1, :], off_labels[1:-1, 0], off_labels[1:-1, -1]]
        )
    )
    keep_open = np.isin(off_labels, border_ids[border_ids > 0])
    return BinaryMask(mask | (~mask & ~keep_open))


def mean_head_intensity(img: GrayImage, mask: BinaryMask) -> float:
    """Arithmetic mean of image intensity over the mask."""
    if img.pixels.shape != mask.bits.shape:
        raise DimensionError(
            f"image shape {img.pixels.shape} != mask shape {mask.bits.shape}"
        )
    if not mask.bits.any():
        raise EmptyRegionError("mask has no true pixels")
    return float(img.pixels[mask.bits].mean())


# ---------------------------------------------------------------------------
# File I/O: 8-bit grayscale/RGB PNG and binary PGM (P5, maxval 255).
# ---------------------------------------------------------------------------


def read_pgm(path: str | Path) -> GrayImage:
    """Read a binary PGM (P5) file with maxval 255."""
    data = Path(path).read_bytes()
    if not data.startswith(b"P5"):
        raise DegenerateInputError(f"{path}: not a P5 PGM file")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":  # comment line
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise DegenerateInputError(f"{path}: PGM maxval must be 255, got {maxval}")
    raster = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos)
    if raster.size != width * height:
        raise DegenerateInputError(f"{path}: truncated PGM raster")
    return GrayImage(raster.reshape(height, width).copy())


def write_pgm(img: GrayImage, path: str | Path) -> None:
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.pixels.tobytes())


def load_image(path: str | Path) -> GrayImage:
    """Load a PNG (8-bit gray or RGB) or PGM (P5) image as grayscale."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        return read_pgm(path)
    if suffix == ".png":
        from PIL import Image

        with Image.open(path) as im:
            if im.mode == "L":
                return GrayImage(np.asarray(im, dtype=np.uint8))
            if im.mode == "RGB":
                return to_grayscale(np.asarray(im, dtype=np.uint8))
            raise DegenerateInputError(
                f"{path}: unsupported PNG mode {im.mode!r} (need 8-bit gray or RGB)"
            )
    raise DegenerateInputError(f"{path}: unsupported image format {suffix!r} (need .png or .pgm)")


def save_image(img: GrayImage, path: str | Path) -> None:
    """Write grayscale PNG or PGM depending on the file suffix."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        write_pgm(img, path)
    elif suffix == ".png":
        from PIL import Image

        Image.fromarray(img.pixels, mode="L").save(path, format="PNG")
    else:
        raise DegenerateInputError(f"{path}: unsupported image format {suffix!r}")
