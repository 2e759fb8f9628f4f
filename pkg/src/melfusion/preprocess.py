"""Feature images for the five lesion classifiers.

Each generator takes a photo and its lesion mask and highlights one aspect:
the whole picture, the outline band, color asymmetry under the mask's
principal-axis reflections, a full-resolution central crop, and the masked
lesion together with a superpixel-averaged copy used as augmentation.
"""

from __future__ import annotations

import csv
import enum
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from skimage.color import rgb2lab
from skimage.measure import label as label_regions

from .imaging import (
    DimensionMismatchError,
    EmptyMaskError,
    ImageFormatError,
    ImagingError,
    as_image,
    as_mask,
    border_strip,
    check_same_shape,
    load_image,
    load_mask,
    mask_geometry,
    perimeter_mask,
    resize_bilinear,
    save_image,
)
from .manifest import SampleManifest

INDEX_HEADER = ["id", "kind", "path", "status"]


class FeatureKind(str, enum.Enum):
    WHOLE = "whole"
    BORDER = "border"
    COLOR_ASYMMETRY = "color_asymmetry"
    CENTER = "center"
    MASKED_LESION = "masked_lesion"

    @classmethod
    def parse(cls, text: str) -> "FeatureKind":
        key = text.strip().lower().replace("-", "_").replace(" ", "_")
        aliases = {"color_asym": "color_asymmetry", "veil": "masked_lesion", "bwv": "masked_lesion"}
        return cls(aliases.get(key, key))


ALL_KINDS: tuple[FeatureKind, ...] = tuple(FeatureKind)


@dataclass(frozen=True)
class PreprocessConfig:
    standard_size: int = 256
    border_out: int = 5
    border_in: int = 20
    superpixel_count: int = 10000
    center_crop: int = 256

    def __post_init__(self):
        for name in ("standard_size", "border_out", "border_in", "superpixel_count", "center_crop"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.standard_size < 8 or self.center_crop < 8:
            raise ValueError("standard_size and center_crop must be at least 8")


def _stable_mean(values: np.ndarray) -> np.ndarray:
    # offsetting by the first row keeps constant inputs bit-exact
    ref = values[0]
    return ref + (values - ref).mean(axis=0)


def _standard(img: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    return resize_bilinear(img, cfg.standard_size, cfg.standard_size)


def _checked(img, mask) -> tuple[np.ndarray, np.ndarray]:
    img, mask = as_image(img), as_mask(mask)
    check_same_shape(img, mask)
    if not mask.any():
        raise EmptyMaskError("mask has no foreground pixels")
    return img, mask


def make_whole(img: np.ndarray, cfg: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    return _standard(as_image(img), cfg)


def make_border(img, mask, cfg: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    img, mask = _checked(img, mask)
    strip = border_strip(mask, cfg.border_out, cfg.border_in)
    return _standard(np.where(strip[..., None], img, 0.0), cfg)


def _bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray, fill: np.ndarray) -> np.ndarray:
    """Sample ``img`` at array coordinates; anything off the frame reads ``fill``."""
    h, w = img.shape[:2]
    padded = np.empty((h + 2, w + 2, 3))
    padded[...] = fill
    padded[1:-1, 1:-1] = img
    px = np.clip(xs + 1.0, 0.0, w + 1.0)
    py = np.clip(ys + 1.0, 0.0, h + 1.0)
    x0 = np.minimum(np.floor(px).astype(np.intp), w)
    y0 = np.minimum(np.floor(py).astype(np.intp), h)
    fx = (px - x0)[..., None]
    fy = (py - y0)[..., None]
    top = padded[y0, x0] + (padded[y0, x0 + 1] - padded[y0, x0]) * fx
    bot = padded[y0 + 1, x0] + (padded[y0 + 1, x0 + 1] - padded[y0 + 1, x0]) * fx
    return top + (bot - top) * fy


def color_asymmetry_map(img, mask) -> np.ndarray:
    """Mean absolute color difference under three reflections, at input resolution.

    Outside the lesion the image is first replaced by the mean perimeter
    color.  The reflections are about the major axis, the minor axis and the
    centroid (both axes at once).
    """
    img, mask = _checked(img, mask)
    geo = mask_geometry(mask)
    fill = _stable_mean(img[perimeter_mask(mask)])
    filled = np.where(mask[..., None], img, fill)

    h, w = mask.shape
    cx, cy = geo.centroid
    dx = (np.arange(w, dtype=np.float64) + 0.5)[None, :] - cx
    dy = (np.arange(h, dtype=np.float64) + 0.5)[:, None] - cy
    dx, dy = np.broadcast_arrays(dx, dy)

    total = np.zeros_like(filled)
    for ux, uy in (geo.major_axis, geo.minor_axis):
        proj = dx * ux + dy * uy
        rx = cx + (2.0 * proj * ux - dx)
        ry = cy + (2.0 * proj * uy - dy)
        total += np.abs(filled - _bilinear_sample(filled, rx - 0.5, ry - 0.5, fill))
    total += np.abs(filled - _bilinear_sample(filled, cx - dx - 0.5, cy - dy - 0.5, fill))
    return np.clip(total / 3.0, 0.0, 1.0)


def make_color_asymmetry(img, mask, cfg: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    return _standard(color_asymmetry_map(img, mask), cfg)


def round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def crop_around(img: np.ndarray, cx: int, cy: int, size: int) -> np.ndarray:
    """``size`` x ``size`` window whose pixel-edge center is ``(cx, cy)``; zero padded."""
    h, w = img.shape[:2]
    x0, y0 = cx - size // 2, cy - size // 2
    out = np.zeros((size, size) + img.shape[2:], dtype=img.dtype)
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(x0 + size, w), min(y0 + size, h)
    if sx1 > sx0 and sy1 > sy0:
        out[sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0] = img[sy0:sy1, sx0:sx1]
    return out


def make_center(img, mask, cfg: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Full-resolution crop around the mask centroid; no rescaling."""
    img, mask = _checked(img, mask)
    cx, cy = mask_geometry(mask).centroid
    return crop_around(img, round_half_up(cx), round_half_up(cy), cfg.center_crop)


# --------------------------------------------------------------------------
# superpixels


def slic_labels(img: np.ndarray, n: int, compactness: float = 10.0, n_iter: int = 10) -> np.ndarray:
    """Grid-seeded local k-means in CIELAB + position, then split into 4-connected pieces.

    Each pixel only competes between the clusters seeded in its own grid
    cell and the eight neighbouring cells.
    """
    h, w = img.shape[:2]
    step = math.sqrt(h * w / n)
    nx = max(1, min(w, round_half_up(w / step)))
    ny = max(1, min(h, round_half_up(h / step)))
    lab = rgb2lab(img)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    xx += 0.5
    yy += 0.5
    home_x = np.minimum((xx * nx / w).astype(np.intp), nx - 1)
    home_y = np.minimum((yy * ny / h).astype(np.intp), ny - 1)

    cand = []
    for oy in (-1, 0, 1):
        for ox in (-1, 0, 1):
            cy_, cx_ = home_y + oy, home_x + ox
            ok = (cy_ >= 0) & (cy_ < ny) & (cx_ >= 0) & (cx_ < nx)
            cand.append(np.where(ok, cy_ * nx + cx_, -1))
    cand = np.stack(cand)  # (9, h, w)
    valid = cand >= 0
    cand_safe = np.where(valid, cand, 0)

    gx, gy = np.meshgrid((np.arange(nx) + 0.5) * w / nx, (np.arange(ny) + 0.5) * h / ny)
    centers_xy = np.stack([gx.ravel(), gy.ravel()], axis=1)
    seed_px = np.minimum(centers_xy.astype(np.intp), [w - 1, h - 1])
    centers_lab = lab[seed_px[:, 1], seed_px[:, 0]].copy()

    spatial = (compactness / step) ** 2
    flat_lab = lab.reshape(-1, 3)
    k = nx * ny
    labels = np.zeros((h, w), dtype=np.intp)
    for _ in range(n_iter):
        c_lab = centers_lab[cand_safe]  # (9, h, w, 3)
        c_xy = centers_xy[cand_safe]
        d_col = ((lab[None] - c_lab) ** 2).sum(axis=-1)
        d_pos = (xx[None] - c_xy[..., 0]) ** 2 + (yy[None] - c_xy[..., 1]) ** 2
        dist = np.where(valid, d_col + spatial * d_pos, np.inf)
        labels = np.take_along_axis(cand_safe, dist.argmin(axis=0)[None], axis=0)[0]

        flat = labels.ravel()
        counts = np.bincount(flat, minlength=k)
        keep = counts > 0
        for c in range(3):
            s = np.bincount(flat, weights=flat_lab[:, c], minlength=k)
            centers_lab[keep, c] = s[keep] / counts[keep]
        sx = np.bincount(flat, weights=xx.ravel(), minlength=k)
        sy = np.bincount(flat, weights=yy.ravel(), minlength=k)
        centers_xy[keep, 0] = sx[keep] / counts[keep]
        centers_xy[keep, 1] = sy[keep] / counts[keep]

    return _enforce_connectivity(labels)


def _enforce_connectivity(labels: np.ndarray) -> np.ndarray:
    """Keep each cluster's largest 4-connected piece; stray pieces join a neighbour."""
    pieces = label_regions(labels + 1, background=0, connectivity=1)
    n_pieces = int(pieces.max())
    sizes = np.bincount(pieces.ravel(), minlength=n_pieces + 1)
    owner = np.zeros(n_pieces + 1, dtype=np.intp)
    owner[pieces.ravel()] = labels.ravel()
    ids = np.arange(1, n_pieces + 1)
    order = np.lexsort((ids, -sizes[1:], owner[1:]))
    first_of_cluster = np.ones(order.size, dtype=bool)
    first_of_cluster[1:] = owner[1:][order][1:] != owner[1:][order][:-1]
    keep = np.zeros(n_pieces + 1, dtype=bool)
    keep[ids[order[first_of_cluster]]] = True

    out = np.where(keep[pieces], labels, -1)
    while (out < 0).any():
        grown = out.copy()
        for axis, shift in ((0, 1), (1, 1), (0, -1), (1, -1)):
            nb = np.roll(out, shift, axis=axis)
            # np.roll wraps around; discard the wrapped row/column
            edge = [slice(None), slice(None)]
            edge[axis] = 0 if shift == 1 else -1
            nb[tuple(edge)] = -1
            take = (grown < 0) & (nb >= 0)
            grown[take] = nb[take]
        out = grown
    return np.unique(out, return_inverse=True)[1].reshape(labels.shape)


def average_by_label(img: np.ndarray, labels: np.ndarray) -> np.ndarray:
    flat = img.reshape(-1, 3)
    lab = labels.ravel()
    k = int(lab.max()) + 1
    counts = np.bincount(lab, minlength=k).astype(np.float64)
    # per-segment offset by the segment's first pixel, so flat segments stay exact
    present, first = np.unique(lab, return_index=True)
    ref = np.zeros((k, 3))
    ref[present] = flat[first]
    dev = flat - ref[lab]
    means = np.empty((k, 3))
    for c in range(3):
        means[:, c] = ref[:, c] + np.bincount(lab, weights=dev[:, c], minlength=k) / counts
    return np.clip(means[lab].reshape(img.shape), 0.0, 1.0)


def superpixel_average(img, n: int) -> np.ndarray:
    """Replace every pixel by the mean color of its superpixel (about ``n`` of them)."""
    if n < 1:
        raise ValueError("superpixel count must be at least 1")
    img = as_image(img)
    h, w = img.shape[:2]
    if n >= h * w:
        return img.copy()
    if n == 1:
        return average_by_label(img, np.zeros((h, w), dtype=np.intp))
    return average_by_label(img, slic_labels(img, n))


def make_masked_lesion(img, mask, cfg: PreprocessConfig = PreprocessConfig()) -> tuple[np.ndarray, np.ndarray]:
    img, mask = _checked(img, mask)
    lesion = _standard(np.where(mask[..., None], img, 0.0), cfg)
    return lesion, superpixel_average(lesion, cfg.superpixel_count)


def make_feature_image(kind: FeatureKind, img, mask, cfg: PreprocessConfig) -> np.ndarray:
    if kind is FeatureKind.WHOLE:
        return make_whole(img, cfg)
    if kind is FeatureKind.BORDER:
        return make_border(img, mask, cfg)
    if kind is FeatureKind.COLOR_ASYMMETRY:
        return make_color_asymmetry(img, mask, cfg)
    if kind is FeatureKind.CENTER:
        return make_center(img, mask, cfg)
    return make_masked_lesion(img, mask, cfg)[0]


# --------------------------------------------------------------------------
# batch driver


def feature_image_path(out_dir, sample_id: str, kind: FeatureKind) -> Path:
    return Path(out_dir) / f"{sample_id}_{kind.value}.png"


def augment_image_path(out_dir, sample_id: str) -> Path:
    return Path(out_dir) / "augment" / f"{sample_id}_{FeatureKind.MASKED_LESION.value}.png"


def _error_status(exc: Exception) -> str:
    if isinstance(exc, EmptyMaskError):
        return "error:empty_mask"
    if isinstance(exc, FileNotFoundError):
        return "error:missing_file"
    if isinstance(exc, ImageFormatError):
        return "error:bad_format"
    if isinstance(exc, DimensionMismatchError):
        return "error:dimension_mismatch"
    return "error:" + type(exc).__name__.lower()


def _process_sample(args) -> list[tuple[str, str, str, str]]:
    sample, cfg, out_dir, kinds = args
    try:
        img = load_image(sample.image_path)
        mask = load_mask(sample.mask_path)
        check_same_shape(img, mask)
        if not mask.any() and any(k is not FeatureKind.WHOLE for k in kinds):
            raise EmptyMaskError("mask has no foreground pixels")
        outputs = {}
        for kind in kinds:
            if kind is FeatureKind.MASKED_LESION:
                lesion, augmented = make_masked_lesion(img, mask, cfg)
                outputs[kind] = lesion
                outputs["augment"] = augmented
            else:
                outputs[kind] = make_feature_image(kind, img, mask, cfg)
    except (ImagingError, OSError) as exc:
        status = _error_status(exc)
        return [(sample.id, k.value, "", status) for k in kinds]

    rows = []
    for kind in kinds:
        path = feature_image_path(out_dir, sample.id, kind)
        save_image(path, outputs[kind])
        rows.append((sample.id, kind.value, path.name, "ok"))
    if "augment" in outputs:
        save_image(augment_image_path(out_dir, sample.id), outputs["augment"])
    return rows


def run_preprocess_batch(
    manifest: list[SampleManifest],
    cfg: PreprocessConfig,
    out_dir,
    kinds=ALL_KINDS,
    jobs: int = 1,
) -> list[tuple[str, str, str, str]]:
    """Write ``<id>_<kind>.png`` for every sample and kind, plus ``index.csv``.

    Failures are recorded per sample in the index ``status`` column; the
    batch carries on.  Returns the index rows.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    kinds = tuple(kinds)
    if FeatureKind.MASKED_LESION in kinds:
        (out_dir / "augment").mkdir(exist_ok=True)
    work = [(s, cfg, out_dir, kinds) for s in manifest]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_process_sample, work, chunksize=4))
    else:
        results = [_process_sample(w) for w in work]
    rows = [row for sample_rows in results for row in sample_rows]
    with open(out_dir / "index.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INDEX_HEADER)
        w.writerows(rows)
    return rows


def read_index(path) -> dict[tuple[str, FeatureKind], Path]:
    """Map ``(id, kind)`` to the PNG path for every row with status ``ok``."""
    path = Path(path)
    found = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if row["status"] == "ok":
                found[(row["id"], FeatureKind(row["kind"]))] = path.parent / row["path"]
    return found
