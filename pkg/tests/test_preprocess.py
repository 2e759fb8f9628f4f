import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import disk
from melfusion.imaging import EmptyMaskError, border_strip, resize_bilinear, save_image, save_mask
from melfusion.manifest import SampleManifest
from melfusion.preprocess import (
    ALL_KINDS,
    FeatureKind,
    PreprocessConfig,
    color_asymmetry_map,
    crop_around,
    make_border,
    make_center,
    make_color_asymmetry,
    make_feature_image,
    make_masked_lesion,
    make_whole,
    read_index,
    run_preprocess_batch,
    slic_labels,
    superpixel_average,
)

SMALL = PreprocessConfig(standard_size=32, border_out=2, border_in=4, superpixel_count=40, center_crop=16)


def ellipse(h, w, cx, cy, a, b):
    yy, xx = np.mgrid[0:h, 0:w]
    return ((xx + 0.5 - cx) / a) ** 2 + ((yy + 0.5 - cy) / b) ** 2 <= 1.0


def test_feature_kind_parse():
    assert len(ALL_KINDS) == 5
    assert FeatureKind.parse("Color-Asymmetry") is FeatureKind.COLOR_ASYMMETRY
    assert FeatureKind.parse("veil") is FeatureKind.MASKED_LESION
    with pytest.raises(ValueError):
        FeatureKind.parse("texture")


@pytest.mark.parametrize("field", ["standard_size", "border_out", "superpixel_count"])
def test_config_rejects_nonpositive(field):
    with pytest.raises(ValueError):
        PreprocessConfig(**{field: 0})
    with pytest.raises(ValueError):
        PreprocessConfig(center_crop=4)


def test_whole_identity_and_constant():
    rng = np.random.default_rng(0)
    img = rng.random((32, 32, 3))
    assert np.array_equal(make_whole(img, SMALL), img)
    const = np.full((64, 64, 3), 0.37)
    out = make_whole(const, SMALL)
    assert out.shape == (32, 32, 3)
    assert np.array_equal(out, const[:32, :32])


def test_border_white_ring_on_black():
    img = np.ones((32, 32, 3))
    mask = np.zeros((32, 32), bool)
    mask[8:24, 8:24] = True
    out = make_border(img, mask, SMALL)
    strip = border_strip(mask, SMALL.border_out, SMALL.border_in)
    assert np.array_equal(out, np.where(strip[..., None], 1.0, 0.0) * np.ones(3))
    assert int(out[..., 0].sum()) == int(strip.sum())
    # the lesion core lies deeper than border_in and is black
    assert not out[14:18, 14:18].any()


def test_border_errors():
    with pytest.raises(EmptyMaskError):
        make_border(np.ones((8, 8, 3)), np.zeros((8, 8), bool), SMALL)
    with pytest.raises(ValueError):
        make_border(np.ones((8, 8, 3)), np.ones((8, 9), bool), SMALL)


def test_color_asymmetry_uniform_lesion_is_zero():
    mask = ellipse(40, 48, 20.3, 19.1, 14, 7) | ellipse(40, 48, 30, 25, 6, 6)
    img = np.where(mask[..., None], [0.4, 0.2, 0.1], [0.9, 0.8, 0.7])
    assert np.abs(color_asymmetry_map(img, mask)).max() < 1e-12


def test_color_asymmetry_concentric_rings_zero():
    # pixel centers are symmetric about (24, 20) under both axis reflections
    h, w = 40, 48
    mask = ellipse(h, w, 24, 20, 15, 9)
    yy, xx = np.mgrid[0:h, 0:w]
    r = np.hypot((xx + 0.5 - 24) / 15, (yy + 0.5 - 20) / 9)
    ring = 0.5 + 0.4 * np.cos(9 * r)
    img = np.stack([ring, ring**2, 1 - ring], axis=-1)
    assert np.abs(color_asymmetry_map(img, mask)).max() < 1e-9


def _brute_asymmetry(img, mask, cx, cy):
    """Integer-index reflections for axis-aligned fixtures centered on a pixel corner."""
    per = mask & ~(
        np.pad(mask, 1)[:-2, 1:-1] & np.pad(mask, 1)[2:, 1:-1] & np.pad(mask, 1)[1:-1, :-2] & np.pad(mask, 1)[1:-1, 2:]
    )
    fill = img[per].mean(axis=0)
    f = np.where(mask[..., None], img, fill)
    h, w = mask.shape
    ys, xs = np.mgrid[0:h, 0:w]
    ry = 2 * cy - 1 - ys
    rx = 2 * cx - 1 - xs

    def take(yi, xi):
        ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        out = np.broadcast_to(fill, f.shape).copy()
        out[ok] = f[yi[ok], xi[ok]]
        return out

    diffs = [np.abs(f - take(ry, xs)), np.abs(f - take(ys, rx)), np.abs(f - take(ry, rx))]
    return sum(diffs) / 3.0


def test_color_asymmetry_half_split_two_thirds():
    # major axis horizontal; the minor axis x = 24 splits black from white
    h, w, cx, cy = 32, 48, 24, 16
    mask = ellipse(h, w, cx, cy, 16, 8)
    xx = np.mgrid[0:h, 0:w][1]
    val = (xx >= cx).astype(float)
    img = np.repeat(val[..., None], 3, axis=2)
    out = color_asymmetry_map(img, mask)
    assert np.allclose(out[mask], 2.0 / 3.0, atol=1e-12)
    assert np.allclose(out[~mask], 0.0, atol=1e-12)
    assert np.allclose(out, _brute_asymmetry(img, mask, cx, cy), atol=1e-12)


def test_color_asymmetry_matches_brute_force_random():
    rng = np.random.default_rng(3)
    h, w, cx, cy = 36, 50, 25, 18
    mask = ellipse(h, w, cx, cy, 17, 9)
    img = rng.random((h, w, 3))
    out = color_asymmetry_map(img, mask)
    assert np.allclose(out, _brute_asymmetry(img, mask, cx, cy), atol=1e-9)


def test_color_asymmetry_reflection_invariant():
    rng = np.random.default_rng(4)
    h, w = 32, 48
    mask = ellipse(h, w, 24, 16, 16, 8)
    img = rng.random((h, w, 3))
    base = color_asymmetry_map(img, mask)
    flipped = color_asymmetry_map(img[::-1], mask[::-1])
    assert np.abs(flipped[::-1] - base).max() < 1e-6
    out = make_color_asymmetry(img, mask, SMALL)
    assert out.shape == (32, 32, 3)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_center_crop_exact_block():
    rng = np.random.default_rng(5)
    img = rng.random((64, 64, 3))
    mask = disk(64, 64, 32, 32, 10)
    out = make_center(img, mask, SMALL)
    assert np.array_equal(out, img[24:40, 24:40])


def test_center_crop_corner_padding():
    rng = np.random.default_rng(6)
    img = rng.random((20, 20, 3))
    out = crop_around(img, 0, 0, 16)
    assert np.array_equal(out[8:, 8:], img[:8, :8])
    assert not out[:8].any() and not out[:, :8].any()


def test_center_rounds_half_up():
    img = np.arange(20 * 20 * 3, dtype=float).reshape(20, 20, 3) / 1200.0
    mask = np.zeros((20, 20), bool)
    mask[0, 0] = True  # centroid (0.5, 0.5) rounds to (1, 1)
    out = make_center(img, mask, SMALL)
    assert np.array_equal(out, crop_around(img, 1, 1, 16))


def test_center_small_image_padded():
    img = np.full((10, 10, 3), 0.5)
    out = make_center(img, np.ones((10, 10), bool), SMALL)
    assert out.shape == (16, 16, 3)
    assert np.array_equal(out[3:13, 3:13], img)
    assert out.sum() == pytest.approx(0.5 * 300)


def test_center_idempotent():
    rng = np.random.default_rng(7)
    img = rng.random((30, 40, 3))
    mask = disk(30, 40, 5, 26, 4)
    once = make_center(img, mask, SMALL)
    assert np.array_equal(crop_around(once, 8, 8, 16), once)


def test_superpixel_average_trivial_cases():
    rng = np.random.default_rng(8)
    img = rng.random((24, 24, 3))
    assert np.array_equal(superpixel_average(img, 24 * 24), img)
    assert np.array_equal(superpixel_average(img, 10**6), img)
    one = superpixel_average(img, 1)
    assert np.allclose(one, img.reshape(-1, 3).mean(axis=0), atol=1e-12)
    const = np.full((24, 24, 3), 0.61)
    for n in (1, 5, 36, 200):
        assert np.array_equal(superpixel_average(const, n), const)
    with pytest.raises(ValueError):
        superpixel_average(img, 0)


def test_superpixel_average_preserves_mean_and_segments():
    rng = np.random.default_rng(9)
    img = resize_bilinear(rng.random((12, 12, 3)), 48, 48)
    labels = slic_labels(img, 36)
    n_seg = labels.max() + 1
    assert 18 <= n_seg <= 72
    from skimage.measure import label as cc

    for k in range(n_seg):
        assert cc(labels == k, connectivity=1).max() == 1
    out = superpixel_average(img, 36)
    assert np.abs(out.reshape(-1, 3).mean(axis=0) - img.reshape(-1, 3).mean(axis=0)).max() < 1e-9
    assert len(np.unique(out.reshape(-1, 3), axis=0)) <= n_seg


def test_masked_lesion_contracts():
    rng = np.random.default_rng(10)
    img = rng.random((32, 32, 3))
    lesion, aug = make_masked_lesion(img, np.ones((32, 32), bool), SMALL)
    assert np.array_equal(lesion, img)
    mask = disk(32, 32, 16, 16, 9)
    lesion, aug = make_masked_lesion(img, mask, SMALL)
    assert not lesion[~mask].any()
    assert aug.shape == lesion.shape
    big = PreprocessConfig(standard_size=32, superpixel_count=32 * 32, center_crop=16)
    lesion, aug = make_masked_lesion(img, mask, big)
    assert np.array_equal(aug, lesion)


@settings(max_examples=20, deadline=None)
@given(
    h=st.integers(8, 64),
    w=st.integers(8, 64),
    seed=st.integers(0, 2**31 - 1),
)
def test_generators_dimension_contract(h, w, seed):
    rng = np.random.default_rng(seed)
    img = rng.random((h, w, 3))
    mask = rng.random((h, w)) < 0.3
    mask[h // 2, w // 2] = True
    for kind in ALL_KINDS:
        out = make_feature_image(kind, img, mask, SMALL)
        size = SMALL.center_crop if kind is FeatureKind.CENTER else SMALL.standard_size
        assert out.shape == (size, size, 3)
        assert np.isfinite(out).all() and out.min() >= 0.0 and out.max() <= 1.0
        again = make_feature_image(kind, img, mask, SMALL)
        assert np.array_equal(out, again)


def _write_samples(root, n, empty=(), missing=()):
    samples = []
    for i in range(n):
        sid = f"x{i}"
        mask = disk(40, 40, 18 + i, 21, 9)
        if sid in empty:
            mask[:] = False
        img = np.where(mask[..., None], [0.3, 0.25, 0.2], [0.85, 0.75, 0.7]) + 0.02 * i
        if sid not in missing:
            save_image(root / f"{sid}.png", img)
        save_mask(root / f"{sid}_mask.png", mask)
        samples.append(SampleManifest(sid, str(root / f"{sid}.png"), str(root / f"{sid}_mask.png"), i % 2, i % 2))
    return samples


def _index_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_batch_counts_and_rerun(tmp_path):
    samples = _write_samples(tmp_path, 3)
    out = tmp_path / "feat"
    rows = run_preprocess_batch(samples, SMALL, out)
    assert len(rows) == 15 and all(r[3] == "ok" for r in rows)
    assert len(list(out.glob("*.png"))) == 15
    index = _index_rows(out / "index.csv")
    assert [r["status"] for r in index] == ["ok"] * 15
    assert set(read_index(out / "index.csv")) == {(s.id, k) for s in samples for k in ALL_KINDS}
    first = {p.name: p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}
    run_preprocess_batch(samples, SMALL, out, jobs=2)
    second = {p.name: p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}
    assert first == second


def test_batch_isolates_failures(tmp_path):
    samples = _write_samples(tmp_path, 3, empty={"x1"}, missing={"x2"})
    out = tmp_path / "feat"
    run_preprocess_batch(samples, SMALL, out)
    status = {}
    for r in _index_rows(out / "index.csv"):
        status.setdefault(r["id"], set()).add(r["status"])
    assert status == {"x0": {"ok"}, "x1": {"error:empty_mask"}, "x2": {"error:missing_file"}}
    assert len(list(out.glob("x0_*.png"))) == 5
    assert not list(out.glob("x1_*.png"))
