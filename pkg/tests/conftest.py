import numpy as np
import pytest

from melfusion.imaging import save_image, save_mask

# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}

CRITERIA = {
    1: "gradient check vs central differences",
    2: "trapezoid AUC equals concordance oracle",
    3: "biased crossentropy identities",
    4: "geometry oracles (strip, dice/iou, axes)",
    5: "color asymmetry null on symmetric fixtures",
    6: "fusion benefit of the feature-layer committee",
    7: "loss-bias sweep trend at FNR 0.1",
    8: "curve averaging versus mean AUC",
    9: "indication percentiles",
    10: "end-to-end determinism",
    11: "segmentation metrics and fallback segmenter",
}


@pytest.fixture
def acceptance():
    def record(criterion: int, passed: bool, detail: str = "") -> None:
        ACCEPTANCE[criterion] = (bool(passed), detail)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for cid, title in CRITERIA.items():
        if cid in ACCEPTANCE:
            ok, detail = ACCEPTANCE[cid]
            tr.write_line(f"[{'PASS' if ok else 'FAIL'}] {cid:2d}. {title}: {detail}")
        else:
            tr.write_line(f"[----] {cid:2d}. {title}: not run")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def disk(h, w, cx, cy, r):
    yy, xx = np.mgrid[0:h, 0:w]
    return (xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2 <= r * r


@pytest.fixture
def lesion_files(tmp_path):
    """A dark disk on a light background, saved as photo + mask."""
    mask = disk(48, 48, 24, 24, 12)
    img = np.where(mask[..., None], [0.3, 0.2, 0.1], [0.9, 0.8, 0.7]).astype(np.float64)
    save_image(tmp_path / "img.png", img)
    save_mask(tmp_path / "mask.png", mask)
    return tmp_path / "img.png", tmp_path / "mask.png", img, mask


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """40 small synthetic lesions, preprocessed at 32 px; returns (manifest, feature_dir, root)."""
    from melfusion.preprocess import PreprocessConfig, run_preprocess_batch
    from melfusion.synthetic import SyntheticParams, generate_synthetic

    root = tmp_path_factory.mktemp("tiny")
    params = SyntheticParams(n_samples=40, image_size=48, melanoma_fraction=0.3, veil=1.0, seed=3)
    manifest, _ = generate_synthetic(params, root / "data")
    cfg = PreprocessConfig(standard_size=32, border_out=2, border_in=4, superpixel_count=100, center_crop=16)
    run_preprocess_batch(manifest, cfg, root / "features")
    return manifest, root / "features", root

