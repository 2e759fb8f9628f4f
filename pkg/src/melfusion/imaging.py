"""Raster containers, PNG I/O, resizing and binary-mask geometry.

Images are ``(H, W, 3)`` float64 arrays with channels in ``[0, 1]``; masks are
``(H, W)`` boolean arrays (``True`` = lesion).  Pixel ``(x, y)`` addresses
column ``x`` and row ``y``; its center sits at ``(x + 0.5, y + 0.5)``.
"""

from __future__ import annotations

import csv
import math
import struct
from pathlib import Path
from typing import NamedTuple

import numpy as np
import scipy.ndimage as ndi
from PIL import Image
from skimage.filters import threshold_otsu

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
# IHDR colour types: 0 gray, 2 RGB, 3 palette, 4 gray+alpha, 6 RGBA
_RGB_COLOR_TYPES = {2, 6}
_MASK_COLOR_TYPES = {0, 2, 4, 6}


class ImagingError(ValueError):
    """Base class for raster and mask errors."""


class ImageFormatError(ImagingError):
    """The file is not a decodable 8-bit PNG of an accepted colour type."""


class EmptyMaskError(ImagingError):
    """A mask operation needs at least one foreground pixel."""


class FullMaskError(ImagingError):
    """A mask operation needs at least one background pixel."""


class DimensionMismatchError(ImagingError):
    pass


class MaskGeometry(NamedTuple):
    centroid: tuple[float, float]
    major_axis: tuple[float, float]
    minor_axis: tuple[float, float]
    axis_eigenvalues: tuple[float, float]


class SegMetrics(NamedTuple):
    iou: float
    dice: float
    empty: bool


# --------------------------------------------------------------------------
# validation helpers


def as_image(data) -> np.ndarray:
    img = np.asarray(data, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImagingError(f"expected an (H, W, 3) image, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ImagingError("image has a zero dimension")
    if not np.all((img >= 0.0) & (img <= 1.0)):
        raise ImagingError("channel values must lie in [0, 1]")
    return img


def as_mask(data) -> np.ndarray:
    m = np.asarray(data)
    if m.ndim != 2:
        raise ImagingError(f"expected an (H, W) mask, got shape {m.shape}")
    return m.astype(bool, copy=False)


def check_same_shape(img: np.ndarray, mask: np.ndarray) -> None:
    if img.shape[:2] != mask.shape:
        raise DimensionMismatchError(
            f"image is {img.shape[1]}x{img.shape[0]}, mask is {mask.shape[1]}x{mask.shape[0]}"
        )


def _require_foreground(mask: np.ndarray) -> None:
    if not mask.any():
        raise EmptyMaskError("mask has no foreground pixels")


# --------------------------------------------------------------------------
# PNG I/O


def _png_header(path: Path) -> tuple[int, int]:
    """Return ``(bit_depth, color_type)`` read straight from the IHDR chunk."""
    with open(path, "rb") as fh:
        head = fh.read(33)
    if len(head) < 33 or head[:8] != PNG_SIGNATURE or head[12:16] != b"IHDR":
        raise ImageFormatError(f"{path}: not a PNG file")
    bit_depth, color_type = struct.unpack(">BB", head[24:26])
    return bit_depth, color_type


def _decode(path: Path) -> Image.Image:
    try:
        im = Image.open(path)
        im.load()
    except (OSError, SyntaxError, ValueError) as exc:
        raise ImageFormatError(f"{path}: cannot decode PNG ({exc})") from exc
    return im


def load_image(path) -> np.ndarray:
    """Read an 8-bit RGB or RGBA PNG; alpha is dropped and channels scaled to [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    bit_depth, color_type = _png_header(path)
    if bit_depth != 8 or color_type not in _RGB_COLOR_TYPES:
        raise ImageFormatError(
            f"{path}: need 8-bit RGB/RGBA, got bit depth {bit_depth}, colour type {color_type}"
        )
    im = _decode(path).convert("RGB")
    return np.asarray(im, dtype=np.float64) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_image(path, img: np.ndarray) -> None:
    img = as_image(img)
    Image.fromarray(to_uint8(img), mode="RGB").save(Path(path), format="PNG")


def load_mask(path) -> np.ndarray:
    """Read an 8-bit mask PNG; gray values >= 128 are foreground.

    Colour masks are reduced to their first channel.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such mask: {path}")
    bit_depth, color_type = _png_header(path)
    if bit_depth not in (1, 8) or color_type not in _MASK_COLOR_TYPES:
        raise ImageFormatError(
            f"{path}: need 8-bit grayscale mask, got bit depth {bit_depth}, colour type {color_type}"
        )
    im = _decode(path)
    arr = np.asarray(im.convert("L") if im.mode == "1" else im)
    if arr.ndim == 3:
        arr = arr[..., 0]
    if im.mode == "1":
        return arr > 0
    return arr >= 128


def save_mask(path, mask: np.ndarray) -> None:
    mask = as_mask(mask)
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(Path(path), format="PNG")


# --------------------------------------------------------------------------
# resampling


def _axis_weights(n_src: int, n_dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # center-aligned sampling, clamped at the edges
    pos = (np.arange(n_dst, dtype=np.float64) + 0.5) * (n_src / n_dst) - 0.5
    pos = np.clip(pos, 0.0, n_src - 1)
    i0 = np.floor(pos).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_src - 1)
    return i0, i1, pos - i0


def resize_bilinear(img: np.ndarray, w: int, h: int) -> np.ndarray:
    """Resize to ``w`` x ``h`` with center-aligned bilinear sampling and edge clamping."""
    if w < 1 or h < 1:
        raise ImagingError(f"target size must be positive, got {w}x{h}")
    img = np.asarray(img, dtype=np.float64)
    src_h, src_w = img.shape[:2]
    if (src_w, src_h) == (w, h):
        return img.copy()
    y0, y1, wy = _axis_weights(src_h, h)
    x0, x1, wx = _axis_weights(src_w, w)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    top = img[y0][:, x0] + (img[y0][:, x1] - img[y0][:, x0]) * wx
    bot = img[y1][:, x0] + (img[y1][:, x1] - img[y1][:, x0]) * wx
    out = top + (bot - top) * wy
    return np.clip(out, 0.0, 1.0)


def threshold_soft_mask(soft: np.ndarray, t: float = 0.5) -> np.ndarray:
    if not 0.0 < t < 1.0:
        raise ImagingError(f"threshold must lie in (0, 1), got {t}")
    soft = np.asarray(soft, dtype=np.float64)
    if soft.ndim != 2:
        raise ImagingError("soft mask must be 2-D")
    return soft >= t


# --------------------------------------------------------------------------
# geometry


def mask_geometry(mask: np.ndarray) -> MaskGeometry:
    """Centroid and principal axes of the foreground pixel centers.

    Second moments are accumulated in exact integer arithmetic, so the axes
    do not change under integer translations.  When the two eigenvalues
    coincide the major axis is taken as ``(1, 0)``.
    """
    mask = as_mask(mask)
    ys, xs = np.nonzero(mask)
    n = xs.size
    if n == 0:
        raise EmptyMaskError("mask has no foreground pixels")
    sx, sy = int(xs.sum()), int(ys.sum())
    sxx = int((xs.astype(np.int64) ** 2).sum())
    syy = int((ys.astype(np.int64) ** 2).sum())
    sxy = int((xs.astype(np.int64) * ys.astype(np.int64)).sum())
    # n^2 * central moments, exact as Python ints
    cxx_n2 = n * sxx - sx * sx
    cyy_n2 = n * syy - sy * sy
    cxy_n2 = n * sxy - sx * sy

    centroid = (sx / n + 0.5, sy / n + 0.5)
    n2 = float(n) * float(n)
    a, c, b = cxx_n2 / n2, cyy_n2 / n2, cxy_n2 / n2
    half_diff = (a - c) / 2.0
    radius = math.hypot(half_diff, b)
    mean = (a + c) / 2.0
    lam_major, lam_minor = mean + radius, max(mean - radius, 0.0)

    if cxy_n2 == 0 and cxx_n2 == cyy_n2:
        major = (1.0, 0.0)
    elif cxy_n2 == 0:
        major = (1.0, 0.0) if cxx_n2 > cyy_n2 else (0.0, 1.0)
    else:
        theta = 0.5 * math.atan2(2.0 * b, a - c)
        major = (math.cos(theta), math.sin(theta))
        if major[0] < 0 or (major[0] == 0 and major[1] < 0):
            major = (-major[0], -major[1])
    minor = (-major[1], major[0])
    return MaskGeometry(centroid, major, minor, (lam_major, lam_minor))


def border_strip(mask: np.ndarray, out_w: float = 5, in_w: float = 20) -> np.ndarray:
    """Band around the lesion outline.

    Foreground pixels whose center lies within ``in_w`` of the nearest
    background pixel center, plus background pixels within ``out_w`` of the
    nearest foreground pixel center.  The image frame is not a boundary.
    """
    mask = as_mask(mask)
    _require_foreground(mask)
    if mask.all():
        raise FullMaskError("mask has no background, so it has no boundary")
    dist_in = ndi.distance_transform_edt(mask)
    dist_out = ndi.distance_transform_edt(~mask)
    return (mask & (dist_in <= in_w)) | (~mask & (dist_out <= out_w))


def perimeter_mask(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a background 4-neighbour; the image frame counts as background."""
    mask = as_mask(mask)
    padded = np.pad(mask, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return mask & ~interior


def perimeter_pixels(mask: np.ndarray) -> list[tuple[int, int]]:
    mask = as_mask(mask)
    _require_foreground(mask)
    ys, xs = np.nonzero(perimeter_mask(mask))
    return [(int(x), int(y)) for x, y in zip(xs, ys)]


def seg_metrics(pred: np.ndarray, truth: np.ndarray) -> SegMetrics:
    """IoU and Dice of two masks.

    Two empty masks score 1 on both; exactly one empty mask scores 0.
    Dice is derived from IoU so ``dice == 2 * iou / (1 + iou)`` holds bit for bit.
    """
    pred, truth = as_mask(pred), as_mask(truth)
    if pred.shape != truth.shape:
        raise DimensionMismatchError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    inter = int(np.count_nonzero(pred & truth))
    union = int(np.count_nonzero(pred | truth))
    iou = 1.0 if union == 0 else inter / union
    dice = 2.0 * iou / (1.0 + iou)
    return SegMetrics(iou=iou, dice=dice, empty=not pred.any())


def summarize_seg_metrics(metrics) -> tuple[float, float, float]:
    """(mean IoU, mean Dice, empty rate); zeros for an empty list."""
    if not metrics:
        return 0.0, 0.0, 0.0
    return (
        float(np.mean([m.iou for m in metrics])),
        float(np.mean([m.dice for m in metrics])),
        float(np.mean([m.empty for m in metrics])),
    )


def write_seg_metrics_csv(path, rows: list[tuple[str, SegMetrics]], summary: bool = False) -> None:
    """Per-sample rows; with ``summary`` a final ``mean`` row holds mean IoU,
    mean Dice and the empty rate in the ``empty`` column."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "iou", "dice", "empty"])
        for sample_id, m in rows:
            w.writerow([sample_id, format(m.iou, ".17g"), format(m.dice, ".17g"), int(m.empty)])
        if summary:
            w.writerow(["mean"] + [format(v, ".17g") for v in summarize_seg_metrics([m for _, m in rows])])


# --------------------------------------------------------------------------
# classical segmentation


def _central_ellipse(h: int, w: int, area_fraction: float = 0.4) -> np.ndarray:
    # semi-axes proportional to the frame: pi * (s w / 2) (s h / 2) = f w h
    s = math.sqrt(4.0 * area_fraction / math.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    u = (xx + 0.5 - w / 2.0) / (s * w / 2.0)
    v = (yy + 0.5 - h / 2.0) / (s * h / 2.0)
    return u * u + v * v <= 1.0


def fallback_segment(img: np.ndarray, blur_sigma: float = 1.5) -> np.ndarray:
    """Otsu threshold on blurred luminance, keep the largest dark component, fill holes.

    A constant image (or one whose dark class is empty) yields a centered
    ellipse covering 40 % of the frame, so callers never receive an empty mask.
    """
    img = as_image(img)
    h, w = img.shape[:2]
    gray = img @ np.array([0.299, 0.587, 0.114])
    if blur_sigma > 0:
        gray = ndi.gaussian_filter(gray, blur_sigma, mode="nearest")
    if np.ptp(gray) <= 1e-12:
        return _central_ellipse(h, w)
    dark = gray <= threshold_otsu(gray)
    labels, n = ndi.label(dark)
    if n == 0:
        return _central_ellipse(h, w)
    sizes = np.bincount(labels.ravel())[1:]
    keep = labels == (int(np.argmax(sizes)) + 1)
    return ndi.binary_fill_holes(keep)
