"""Acceptance suite: one recorded pass/fail line per criterion.

Each test records its verdict through the ``acceptance`` fixture before
asserting, so the terminal summary lists every criterion even when some
fail.  The training-based criteria share one 400-sample synthetic dataset
in which melanomas carry exactly one of two traits (ragged outline or
two-tone color asymmetry) and nothing else.
"""

import hashlib
import math
import time
from dataclasses import replace

import numpy as np
import pytest
import scipy.ndimage as ndi
from hypothesis import given, settings
from hypothesis import strategies as st

from melfusion import shallownet as sn
from melfusion.cli import EXIT_OK, main
from melfusion.config import RunConfig
from melfusion.evalroc import (
    PredictionSet,
    average_curves,
    indication_percentile,
    metrics_row,
    roc_curve,
)
from melfusion.imaging import border_strip, fallback_segment, load_image, load_mask, mask_geometry, seg_metrics
from melfusion.pipeline import feature_predictions, image_to_features, records_table, train_all_feature_classifiers, train_committee
from melfusion.preprocess import FeatureKind, make_color_asymmetry, make_feature_image, run_preprocess_batch
from melfusion.synthetic import SyntheticParams, generate_synthetic, render_probe

# --------------------------------------------------------------------------
# 1. gradients


def _numeric_grad(model, X, y, tc, masks, h=1e-5):
    out = []
    for p in model.params():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = sn.batch_loss(model, X, y, tc, train_mode=True, masks=masks)
            p[idx] = old - h
            dn = sn.batch_loss(model, X, y, tc, train_mode=True, masks=masks)
            p[idx] = old
            g[idx] = (up - dn) / (2 * h)
        out.append(g)
    return out


def test_gradient_check(acceptance):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for trial in range(100):
        depth = int(rng.integers(0, 3))
        sizes = (int(rng.integers(1, 9)), *(int(rng.integers(1, m + 1)) for m in (5, 3)[:depth]), 2)
        model = sn.init(sn.MlpConfig(sizes, dropout=0.25, seed=trial))
        model = sn.MlpModel(model.config, model.weights, [rng.normal(size=b.shape) for b in model.biases])
        n = int(rng.integers(1, 9))
        X = rng.normal(size=(n, sizes[0]))
        y = rng.integers(0, 2, n)
        tc = sn.TrainConfig(class_weights=tuple(rng.uniform(0.5, 2.0, 2)), loss_bias=float(rng.choice([1, 5, 10])), weight_decay=0.01)
        masks = [rng.random((n, k)) >= 0.25 for k in sizes[1:-1]]
        grads, _ = sn.backward(model, X, y, tc, train_mode=True, masks=masks)
        num = _numeric_grad(model, X, y, tc, masks)
        a = np.concatenate([g.ravel() for g in grads])
        b = np.concatenate([g.ravel() for g in num])
        worst = max(worst, np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 30
    acceptance(1, ok, f"max rel err {worst:.2e} over 100 nets, {elapsed:.1f}s")
    assert ok


# --------------------------------------------------------------------------
# 2. AUC oracle


def _concordance(labels, p):
    pos, neg = p[labels == 1], p[labels == 0]
    d = pos[:, None] - neg[None, :]
    return (np.count_nonzero(d > 0) + 0.5 * np.count_nonzero(d == 0)) / d.size


def test_auc_matches_concordance(acceptance):
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 501))
        y = rng.integers(0, 2, n)
        y[:2] = (0, 1)
        levels = int(rng.integers(1, 60))
        p = rng.integers(0, levels + 1, n) / levels
        worst = max(worst, abs(roc_curve(PredictionSet.from_arrays(y, p)).auc - _concordance(y, p)))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-9 and elapsed < 30
    acceptance(2, ok, f"max |diff| {worst:.1e} on 200 sets, {elapsed:.1f}s")
    assert ok


# --------------------------------------------------------------------------
# 3. biased crossentropy


def test_biased_loss_identities(acceptance):
    rng = np.random.default_rng(303)
    p = rng.uniform(1e-6, 1 - 1e-6, 1000)
    y = rng.integers(0, 2, 1000)
    bce = -(y * np.log(p) + (1 - y) * np.log(1 - p))
    got = sn.biased_loss(p, y, 1.0)
    bce_ok = bool(np.all(np.abs(got - bce) <= 4 * np.finfo(float).eps * np.maximum(1.0, np.abs(bce))))
    bs = np.array([1.0, 1.5, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0])
    pm = rng.uniform(1e-6, 1 - 1e-6, 200)
    curves = np.array([sn.biased_loss(pm, np.ones_like(pm), b) for b in bs])
    increasing = bool(np.all(np.diff(curves, axis=0) > 0))
    ten = abs(sn.biased_loss(0.5, 1, 10) - 10 * math.log(2))
    ok = bce_ok and increasing and ten < 1e-12
    acceptance(3, ok, f"b=1 is BCE: {bce_ok}; increasing in b: {increasing}; |L(1,0.5,10) - 10 ln2| = {ten:.1e}")
    assert ok


# --------------------------------------------------------------------------
# 4. geometry


def _random_blob(rng, h, w):
    noise = ndi.gaussian_filter(rng.normal(size=(h, w)), rng.uniform(1.0, 4.0))
    m = noise > np.quantile(noise, rng.uniform(0.3, 0.8))
    m[rng.integers(h), rng.integers(w)] = True
    if m.all():
        m[0, 0] = False
    return m


def _brute_strip(mask, out_w, in_w):
    pts = np.argwhere(np.ones_like(mask)).astype(np.int64)
    fg, bg = np.argwhere(mask).astype(np.int64), np.argwhere(~mask).astype(np.int64)
    out = np.zeros(mask.size, bool)
    for start in range(0, len(pts), 512):
        chunk = pts[start : start + 512]
        inside = mask[chunk[:, 0], chunk[:, 1]]
        d2_bg = ((chunk[:, None, :] - bg[None, :, :]) ** 2).sum(-1).min(1)
        d2_fg = ((chunk[:, None, :] - fg[None, :, :]) ** 2).sum(-1).min(1)
        d = np.sqrt(np.where(inside, d2_bg, d2_fg).astype(np.float64))
        out[start : start + 512] = d <= np.where(inside, in_w, out_w)
    return out.reshape(mask.shape)


def test_geometry_oracles(acceptance):
    rng = np.random.default_rng(404)
    strip_ok = 0
    for _ in range(50):
        h, w = int(rng.integers(4, 65)), int(rng.integers(4, 65))
        m = _random_blob(rng, h, w)
        out_w, in_w = float(rng.integers(0, 8)) + rng.choice([0.0, 0.5]), float(rng.integers(0, 12)) + rng.choice([0.0, 0.5])
        strip_ok += np.array_equal(border_strip(m, out_w, in_w), _brute_strip(m, out_w, in_w))

    dice_ok = 0
    for _ in range(100):
        shape = tuple(rng.integers(2, 40, 2))
        a, b = rng.random(shape) < rng.random(), rng.random(shape) < rng.random()
        inter, union = np.count_nonzero(a & b), np.count_nonzero(a | b)
        iou = 1.0 if union == 0 else inter / union
        m = seg_metrics(a, b)
        dice_ok += m.iou == iou and m.dice == 2 * iou / (1 + iou)

    axes_ok = 0
    for _ in range(50):
        m = _random_blob(rng, 30, 30)
        g = mask_geometry(m)
        ortho = max(
            abs(math.hypot(*g.major_axis) - 1),
            abs(math.hypot(*g.minor_axis) - 1),
            abs(np.dot(g.major_axis, g.minor_axis)),
        )
        dy, dx = rng.integers(0, 40, 2)
        moved = np.zeros((80, 80), bool)
        moved[dy : dy + 30, dx : dx + 30] = m
        gm = mask_geometry(moved)
        same = gm.major_axis == g.major_axis and gm.minor_axis == g.minor_axis
        axes_ok += ortho < 1e-9 and same

    ok = strip_ok == 50 and dice_ok == 100 and axes_ok == 50
    acceptance(4, ok, f"strip {strip_ok}/50 exact, dice {dice_ok}/100, axes {axes_ok}/50")
    assert ok


# --------------------------------------------------------------------------
# 5. color asymmetry on symmetric lesions


def _mirror(quadrant):
    top = np.concatenate([quadrant[:, ::-1], quadrant], axis=1)
    return np.concatenate([top[::-1], top], axis=0)


def _symmetric_fixture(rng):
    hy, hx = int(rng.integers(12, 40)), int(rng.integers(12, 40))
    # pixel-center offsets from the image center in one quadrant
    yy, xx = np.mgrid[0:hy, 0:hx] + 0.5
    theta = np.arctan2(yy, xx)
    a, b = rng.uniform(0.5, 0.9) * hx, rng.uniform(0.5, 0.9) * hy
    wobble = 1 + sum(rng.uniform(-0.08, 0.08) * np.cos(2 * k * theta) for k in range(1, 4))
    inside = (xx / a) ** 2 + (yy / b) ** 2 <= wobble**2
    color = ndi.gaussian_filter(rng.random((hy, hx, 3)), (2, 2, 0))
    mask = _mirror(inside)
    img = _mirror(np.where(inside[..., None], color, rng.random(3)))
    if rng.random() < 0.5:
        mask, img = mask.T, img.transpose(1, 0, 2)
    return img, mask


def test_color_asymmetry_null(acceptance):
    rng = np.random.default_rng(505)
    worst = 0.0
    for _ in range(30):
        img, mask = _symmetric_fixture(rng)
        worst = max(worst, float(np.abs(make_color_asymmetry(img, mask)).max()))
    ok = worst < 1e-6
    acceptance(5, ok, f"max per-pixel output {worst:.1e} on 30 symmetric lesions")
    assert ok


# --------------------------------------------------------------------------
# 6, 7, 9. the two-trait synthetic dataset

DATA_SEED = 7
N_PROBES = 50


@pytest.fixture(scope="module")
def orthogonal(tmp_path_factory):
    root = tmp_path_factory.mktemp("orthogonal")
    cfg = RunConfig(seed=0, jobs=1)
    params = replace(cfg.synthetic_params(), n_samples=400, ragged=1.0, asymmetry=1.0, veil=0.0, speckle=0.0, seed=DATA_SEED)
    t0 = time.perf_counter()
    manifest, _ = generate_synthetic(params, root / "data")
    run_preprocess_batch(manifest, cfg.preprocess_config(), root / "features")
    pcfg = cfg.pipeline_config()
    results = train_all_feature_classifiers(manifest, pcfg, root / "features")
    return dict(cfg=cfg, params=params, manifest=manifest, pcfg=pcfg, results=results, table=records_table(results), setup=time.perf_counter() - t0)


def test_fusion_benefit(acceptance, orthogonal):
    o = orthogonal
    t0 = time.perf_counter()
    individual = {k.value: metrics_row(k.value, feature_predictions(o["table"][k], o["manifest"])).roc_auc_mean for k in o["table"]}
    fl = train_committee(o["table"], o["manifest"], "feature_layer", o["pcfg"], 1.0, 5)
    sm = train_committee(o["table"], o["manifest"], "softmax", o["pcfg"], 1.0, 5)
    elapsed = o["setup"] + time.perf_counter() - t0
    auc_fl = metrics_row("fl", fl.predictions).roc_auc_mean
    auc_sm = metrics_row("sm", sm.predictions).roc_auc_mean
    best = max(individual.values())
    ok = auc_fl >= best - 0.01 and auc_fl >= auc_sm - 0.02 and elapsed < 600
    detail = f"feature-layer {auc_fl:.4f}, softmax {auc_sm:.4f}, best single {best:.4f}, {elapsed:.0f}s"
    acceptance(6, ok, detail)
    assert ok, individual


def test_bias_sweep_trend(acceptance, orthogonal):
    o = orthogonal
    fpr = {}
    for b in (1.0, 10.0, 100.0):
        res = train_committee(o["table"], o["manifest"], "softmax", o["pcfg"], b, 5)
        fpr[b] = metrics_row(f"b{b:g}", res.predictions).fpr_at_fnr
    ok = fpr[10.0] < fpr[1.0] and fpr[100.0] > fpr[10.0]
    acceptance(7, ok, "fpr at fnr 0.1: " + ", ".join(f"b={b:g} {v:.4f}" for b, v in fpr.items()))
    assert ok


def _probe_percentiles(o):
    cfg, pcfg = o["cfg"], o["pcfg"]
    pre = cfg.preprocess_config()
    out = []
    for i in range(N_PROBES):
        img, mask = render_probe(o["params"], {"ragged": 1.0}, seed=1000 + i)
        fold = i % 5
        pct = {}
        for kind in (FeatureKind.BORDER, FeatureKind.COLOR_ASYMMETRY):
            res = o["results"][kind][fold]
            p, _ = sn.predict(res.model, image_to_features(make_feature_image(kind, img, mask, pre), pcfg.feature_size))
            ref = PredictionSet.from_arrays([lab for _, lab, _ in res.validation], [v for *_, v in res.validation])
            pct[kind] = indication_percentile(float(np.ravel(p)[0]), ref)
        out.append(pct)
    return out


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(2, 80), levels=st.integers(1, 30))
def _percentile_properties(seed, n, levels):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    y[:2] = (0, 1)
    ref = PredictionSet.from_arrays(y, rng.integers(0, levels + 1, n) / levels)
    values = np.sort(rng.random(12))
    pct = [indication_percentile(v, ref) for v in values]
    assert all(a <= b for a, b in zip(pct, pct[1:]))
    k = int(rng.integers(2, 5))
    rep = PredictionSet.from_arrays(np.tile(y, k), np.tile(ref.p_mel, k))
    for v in values:
        assert abs(indication_percentile(v, rep) - indication_percentile(v, ref)) < 1e-12


def test_indication_percentiles(acceptance, orthogonal):
    props = True
    try:
        _percentile_properties()
    except AssertionError:
        props = False
    pcts = _probe_percentiles(orthogonal)
    border = np.array([p[FeatureKind.BORDER] for p in pcts])
    casym = np.array([p[FeatureKind.COLOR_ASYMMETRY] for p in pcts])
    hits = (border > 80) & (casym >= 20) & (casym <= 80)
    rate = float(hits.mean())
    ok = props and rate >= 0.8
    detail = (
        f"{hits.sum()}/{N_PROBES} ragged-only probes hit ({rate:.2f}); border > 80 in {np.mean(border > 80):.2f}, "
        f"color asymmetry in [20, 80] in {np.mean((casym >= 20) & (casym <= 80)):.2f}; property tests {'pass' if props else 'fail'}"
    )
    acceptance(9, ok, detail)
    assert ok


# --------------------------------------------------------------------------
# 8. curve averaging


def _concave_pair(rng):
    """Two score sets with one shared concave ROC but unrelated calibrations."""
    k = int(rng.integers(2, 8))
    npos = rng.integers(1, 12, k)
    nneg = rng.integers(1, 12, k)
    # groups ordered by falling positive share give a concave polygon
    order = np.argsort(-(npos / (npos + nneg)), kind="stable")
    npos, nneg = npos[order], nneg[order]
    labels = np.concatenate([np.r_[np.ones(a, int), np.zeros(b, int)] for a, b in zip(npos, nneg)])
    group = np.repeat(np.arange(k), npos + nneg)

    def calibration():
        levels = np.sort(rng.uniform(0.0, 1.0, k))[::-1]
        return levels[group]

    return PredictionSet.from_arrays(labels, calibration()), PredictionSet.from_arrays(labels, calibration())


def test_curve_averaging_order(acceptance):
    # one ROC, read through a high and a low calibration: vertices are
    # (0, 0), (0, .5), (.5, 1), (1, 1); the averaged points fall inside it
    labels = np.array([1] * 5 + [1] * 5 + [0] * 5 + [0] * 5)
    group = np.repeat([0, 1, 1, 2], 5)
    hi = PredictionSet.from_arrays(labels, np.array([0.9, 0.8, 0.7])[group])
    lo = PredictionSet.from_arrays(labels, np.array([0.3, 0.2, 0.1])[group])
    ch, cl = roc_curve(hi), roc_curve(lo)
    gap = (ch.auc + cl.auc) / 2 - average_curves([ch, cl]).curve.auc

    rng = np.random.default_rng(808)
    holds = 0
    for _ in range(100):
        a, b = (roc_curve(s) for s in _concave_pair(rng))
        holds += average_curves([a, b]).curve.auc <= (a.auc + b.auc) / 2 + 1e-12
    ok = gap >= 0.01 and holds == 100
    acceptance(8, ok, f"constructed gap {gap:.4f}; auc(avg) <= mean on {holds}/100 recalibrated pairs")
    assert ok


# --------------------------------------------------------------------------
# 10. determinism

SMALL_RUN = """
n_samples = 60
image_size = 64
melanoma_fraction = 0.25
veil = 1.0
standard_size = 32
border_out = 2
border_in = 4
superpixel_count = 150
center_crop = 16
feature_size = 8
feature_hidden = 8
feature_learning_rate = 0.003
feature_patience = 3
feature_max_epochs = 8
committee_hidden = 16, 8
committee_patience = 3
committee_max_epochs = 8
repeats = 2
biases = 1, 10
jobs = 2
"""


def _pipeline_hashes(root, cfg_path):
    base = ["--config", str(cfg_path), "--out", str(root), "--seed", "13"]
    for cmd in (["synth"], ["preprocess"], ["train"], ["evaluate"], ["ablate"], ["indicate", "s0000", "s0001"], ["segmetrics"]):
        assert main(cmd + base) == EXIT_OK, cmd
    files = sorted(p for p in root.rglob("*") if p.suffix in (".csv", ".svg"))
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest() for p in files}


def test_end_to_end_determinism(acceptance, tmp_path):
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text(SMALL_RUN)
    a = _pipeline_hashes(tmp_path / "a", cfg_path)
    b = _pipeline_hashes(tmp_path / "b", cfg_path)
    n_svg = sum(k.endswith(".svg") for k in a)
    ok = a == b and n_svg >= 4 and len(a) > 20
    differ = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    acceptance(10, ok, f"{len(a)} CSV/SVG files ({n_svg} SVG), {len(differ)} differ")
    assert ok, differ


# --------------------------------------------------------------------------
# 11. segmentation


def test_segmentation_metrics(acceptance, tmp_path):
    a = np.zeros((6, 8), bool)
    a[1:5, 1:5] = True  # 16 pixels
    b = np.zeros((6, 8), bool)
    b[1:5, 3:7] = True  # 16 pixels, 8 shared
    left = np.zeros_like(a)
    left[1:5, 1:4] = True  # 12 pixels inside a
    fixtures = [
        (a, a, 1.0, 1.0),
        (a, b, 8 / 24, 16 / 32),
        (left, a, 12 / 16, 24 / 28),
        (np.zeros_like(a), a, 0.0, 0.0),
    ]
    # IoU is a ratio of counts; Dice agrees with the count formula to the last bit or two
    hand = all(seg_metrics(p, t).iou == iou and abs(seg_metrics(p, t).dice - dice) <= 2e-16 for p, t, iou, dice in fixtures)

    manifest, _ = generate_synthetic(SyntheticParams(n_samples=100, seed=21), tmp_path)
    ious, empty = [], 0
    for s in manifest:
        pred = fallback_segment(load_image(s.image_path))
        empty += not pred.any()
        ious.append(seg_metrics(pred, load_mask(s.mask_path)).iou)
    median = float(np.median(ious))
    ok = hand and median >= 0.9 and empty == 0
    acceptance(11, ok, f"hand fixtures exact: {hand}; fallback median IoU {median:.3f}, empty rate {empty / len(manifest):.2f}")
    assert ok
