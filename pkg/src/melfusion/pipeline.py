"""Cross-validated training of feature classifiers and the committee machine.

Feature classifiers are small MLPs over downsampled feature images.  For
every fold, each classifier trains on the other folds and emits records
(softmax output and last hidden layer) for the held-out fold only, so the
pooled records are out-of-fold for every sample.  The committee for fold
``f`` then trains on the records of samples outside ``f`` and is tested
on the records of ``f``.
"""

from __future__ import annotations

import csv
import enum
import hashlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import shallownet as sn
from .evalroc import MetricsRow, PredictionSet, metrics_row
from .imaging import load_image, resize_bilinear
from .manifest import SampleManifest
from .preprocess import ALL_KINDS, FeatureKind, augment_image_path, feature_image_path
from .reporting import fmt, write_csv

PREDICTIONS_HEADER = ["id", "fold", "repeat", "label", "p_mel"]
VALIDATION_HEADER = ["id", "fold", "label", "softmax"]


class PipelineError(ValueError):
    pass


class CommitteeInputMode(str, enum.Enum):
    SOFTMAX = "softmax"
    FEATURE_LAYER = "feature_layer"

    @classmethod
    def parse(cls, text: str) -> "CommitteeInputMode":
        key = text.strip().lower().replace("-", "_")
        return cls({"feature": "feature_layer", "features": "feature_layer"}.get(key, key))


@dataclass(frozen=True)
class FeatureVectorRecord:
    id: str
    kind: FeatureKind
    fold: int
    softmax: float
    feature_layer: np.ndarray = field(compare=False)


def _default_feature_train() -> sn.TrainConfig:
    return sn.TrainConfig(learning_rate=1e-3, patience=10, max_epochs=100, batch_size=32)


def _default_committee_train() -> sn.TrainConfig:
    return sn.TrainConfig(learning_rate=1e-3, patience=15, max_epochs=200, batch_size=32)


@dataclass(frozen=True)
class PipelineConfig:
    feature_size: int = 16
    feature_hidden: tuple[int, ...] = (64, 64)
    feature_dropout: float = 0.0
    feature_train: sn.TrainConfig = field(default_factory=_default_feature_train)
    committee_hidden: tuple[int, ...] = (128, 64, 32)
    committee_dropout: float = 0.1
    committee_train: sn.TrainConfig = field(default_factory=_default_committee_train)
    val_fraction: float = 0.1
    # inverse-frequency class weights (mean 1 over samples) unless disabled
    class_weighting: bool = True
    # train the masked-lesion classifier on the veil flag when the manifest has one
    veil_target: bool = True
    # add the superpixel-averaged copies to the masked-lesion training set
    augment: bool = True
    # "global": one mean and scale per image kind; "per_feature": z-score every pixel
    feature_scaling: str = "global"
    seed: int = 0

    def __post_init__(self):
        if self.feature_size < 4:
            raise PipelineError("feature_size must be at least 4")
        if not 0.0 < self.val_fraction < 1.0:
            raise PipelineError("val_fraction must lie in (0, 1)")
        if self.feature_scaling not in ("global", "per_feature"):
            raise PipelineError("feature_scaling must be 'global' or 'per_feature'")


# --------------------------------------------------------------------------
# seeds and splits


def derive_seed(master: int, fold: int, repeat: int, role: str) -> int:
    """Stable 63-bit seed from (master, fold, repeat, role); independent of scheduling."""
    key = f"{int(master)}|{int(fold)}|{int(repeat)}|{role}".encode("utf-8")
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little") >> 1


def class_weights(y: np.ndarray) -> tuple[float, float]:
    """Inverse class frequency, scaled so the per-sample mean weight is 1."""
    y = np.asarray(y)
    n = y.size
    counts = np.array([np.count_nonzero(y == 0), np.count_nonzero(y == 1)], dtype=np.float64)
    if np.any(counts == 0):
        return (1.0, 1.0)
    w = n / (2.0 * counts)
    return (float(w[0]), float(w[1]))


def internal_split(samples: list[SampleManifest], fraction: float, seed: int) -> tuple[list[str], list[str]]:
    """Stratified (train ids, validation ids); each class gives round(fraction * n_c), at least one."""
    train_ids, val_ids = [], []
    rng = np.random.default_rng(seed)
    for label in (0, 1):
        ids = sorted(s.id for s in samples if s.label == label)
        if not ids:
            continue
        n_val = min(max(1, int(round(fraction * len(ids)))), len(ids) - 1) if len(ids) > 1 else 0
        order = rng.permutation(len(ids))
        chosen = set(order[:n_val].tolist())
        for j, sid in enumerate(ids):
            (val_ids if j in chosen else train_ids).append(sid)
    return sorted(train_ids), sorted(val_ids)


def fold_split(manifest: list[SampleManifest], fold: int, cfg: PipelineConfig):
    """(train ids, validation ids, test ids) for one outer fold; shared by classifiers and committee."""
    outside = [s for s in manifest if s.fold != fold]
    test = sorted(s.id for s in manifest if s.fold == fold)
    if not test:
        raise PipelineError(f"fold {fold} has no samples")
    tr, va = internal_split(outside, cfg.val_fraction, derive_seed(cfg.seed, fold, 0, "split"))
    return tr, va, test


def check_no_leakage(test_ids, *other_splits) -> None:
    test = set(test_ids)
    for ids in other_splits:
        bad = test.intersection(ids)
        if bad:
            raise PipelineError(f"test samples leaked into training: {sorted(bad)[:5]}")


# --------------------------------------------------------------------------
# feature vectors


def image_to_features(img: np.ndarray, d: int) -> np.ndarray:
    """Downsample to d x d and flatten to a 3*d*d vector (row-major, channels last)."""
    if d < 1:
        raise PipelineError("d must be positive")
    return resize_bilinear(img, d, d).reshape(-1).copy()


@dataclass
class KindData:
    """Feature vectors of one kind for every sample, plus optional augmentation copies."""

    kind: FeatureKind
    vectors: dict[str, np.ndarray]
    augmented: dict[str, np.ndarray] = field(default_factory=dict)


def load_kind_data(kind: FeatureKind, manifest: list[SampleManifest], feature_dir, d: int, augment: bool = True) -> KindData:
    feature_dir = Path(feature_dir)
    vectors, augmented = {}, {}
    for s in manifest:
        path = feature_image_path(feature_dir, s.id, kind)
        if not path.exists():
            raise PipelineError(f"missing preprocessed image {path}")
        vectors[s.id] = image_to_features(load_image(path), d)
        if augment and kind is FeatureKind.MASKED_LESION:
            aug = augment_image_path(feature_dir, s.id)
            if aug.exists():
                augmented[s.id] = image_to_features(load_image(aug), d)
    return KindData(kind, vectors, augmented)


def _targets(kind: FeatureKind, manifest: list[SampleManifest], cfg: PipelineConfig) -> dict[str, int]:
    # a veil column without both classes (e.g. veil effect switched off) falls back to the label
    use_veil = (
        cfg.veil_target
        and kind is FeatureKind.MASKED_LESION
        and all(s.veil is not None for s in manifest)
        and len({s.veil for s in manifest}) == 2
    )
    return {s.id: int(s.veil if use_veil else s.label) for s in manifest}


def _global_standardizer(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # z-scoring each pixel would blow up pixels that are nearly constant across samples
    std = float(X.std())
    n = X.shape[1]
    return np.full(n, float(X.mean())), np.full(n, std if std > 1e-8 else 1.0)


def _fit(X, y, Xv, yv, hidden, dropout, tc_base: sn.TrainConfig, init_seed: int, train_seed: int, weighting: bool, scaling: str = "per_feature"):
    mean, scale = _global_standardizer(X) if scaling == "global" else sn.fit_standardizer(X)
    model = sn.init(sn.MlpConfig((X.shape[1], *hidden, 2), dropout=dropout, seed=init_seed))
    tc = replace(tc_base, seed=train_seed, class_weights=class_weights(y) if weighting else None)
    best, history = sn.train(model, ((X - mean) / scale, y), ((Xv - mean) / scale, yv), tc)
    return sn.absorb_standardizer(best, mean, scale), history


@dataclass
class FeatureClassifierResult:
    kind: FeatureKind
    fold: int
    model: sn.MlpModel
    records: list[FeatureVectorRecord]
    # (id, label, softmax) on the internal validation split; reference set for indications
    validation: list[tuple[str, int, float]]
    train_ids: list[str]
    val_ids: list[str]
    history: sn.TrainHistory


def train_feature_classifier(
    kind: FeatureKind,
    manifest: list[SampleManifest],
    fold: int,
    cfg: PipelineConfig,
    data: KindData,
) -> FeatureClassifierResult:
    """Train one kind on the folds other than ``fold``; emit records for ``fold``."""
    kind = FeatureKind(kind)
    missing = [s.id for s in manifest if s.id not in data.vectors]
    if missing:
        raise PipelineError(f"{kind.value}: no feature vectors for {missing[:5]}")
    tr, va, test = fold_split(manifest, fold, cfg)
    check_no_leakage(test, tr, va)
    target = _targets(kind, manifest, cfg)
    X = [data.vectors[i] for i in tr]
    y = [target[i] for i in tr]
    for i in tr:
        if i in data.augmented:
            X.append(data.augmented[i])
            y.append(target[i])
    X, y = np.array(X), np.array(y, dtype=np.intp)
    Xv = np.array([data.vectors[i] for i in va])
    yv = np.array([target[i] for i in va], dtype=np.intp)

    model, history = _fit(
        X, y, Xv, yv,
        cfg.feature_hidden, cfg.feature_dropout, cfg.feature_train,
        # one init per kind across folds keeps hidden units roughly aligned
        derive_seed(cfg.seed, -1, 0, f"feature:{kind.value}:init"),
        derive_seed(cfg.seed, fold, 0, f"feature:{kind.value}"),
        cfg.class_weighting,
        cfg.feature_scaling,
    )
    p_test, f_test = sn.predict(model, np.array([data.vectors[i] for i in test]))
    records = [FeatureVectorRecord(i, kind, fold, float(p), f.copy()) for i, p, f in zip(test, p_test, f_test)]
    p_val, _ = sn.predict(model, Xv)
    labels = {s.id: s.label for s in manifest}
    validation = [(i, labels[i], float(p)) for i, p in zip(va, p_val)]
    return FeatureClassifierResult(kind, fold, model, records, validation, tr, va, history)


def _feature_job(args):
    kind, manifest, fold, cfg, data = args
    return train_feature_classifier(kind, manifest, fold, cfg, data)


def folds_of(manifest: list[SampleManifest]) -> list[int]:
    folds = sorted({s.fold for s in manifest})
    if not folds or folds[0] < 0:
        raise PipelineError("every sample needs a fold assignment")
    return folds


def train_all_feature_classifiers(
    manifest: list[SampleManifest],
    cfg: PipelineConfig,
    feature_dir,
    kinds=ALL_KINDS,
    jobs: int = 1,
) -> dict[FeatureKind, list[FeatureClassifierResult]]:
    """Every (kind, fold) classifier; results per kind are in fold order."""
    kinds = [FeatureKind(k) for k in kinds]
    folds = folds_of(manifest)
    work = []
    for kind in kinds:
        data = load_kind_data(kind, manifest, feature_dir, cfg.feature_size, cfg.augment)
        work.extend((kind, manifest, f, cfg, data) for f in folds)
    results = _run_jobs(_feature_job, work, jobs)
    out: dict[FeatureKind, list[FeatureClassifierResult]] = {k: [] for k in kinds}
    for r in results:
        out[r.kind].append(r)
    return out


def _run_jobs(fn, work, jobs: int):
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, work))
    return [fn(w) for w in work]


# --------------------------------------------------------------------------
# records I/O


RecordTable = dict  # FeatureKind -> {id: FeatureVectorRecord}


def records_table(results: dict[FeatureKind, list[FeatureClassifierResult]]) -> RecordTable:
    return {kind: {r.id: r for res in rs for r in res.records} for kind, rs in results.items()}


def write_feature_records(path, records: list[FeatureVectorRecord]) -> None:
    records = sorted(records, key=lambda r: r.id)
    width = {r.feature_layer.size for r in records}
    if len(width) > 1:
        raise PipelineError("feature-layer widths differ within one kind")
    n = width.pop() if width else 0
    header = ["id", "fold", "softmax", *(f"f{i}" for i in range(n))]
    write_csv(path, header, ([r.id, r.fold, r.softmax, *r.feature_layer.tolist()] for r in records))


def read_feature_records(path, kind: FeatureKind) -> dict[str, FeatureVectorRecord]:
    kind = FeatureKind(kind)
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:3] != ["id", "fold", "softmax"]:
            raise PipelineError(f"{path}: not a feature record file")
        for row in reader:
            feats = np.array([float(v) for v in row[3:]], dtype=np.float64)
            out[row[0]] = FeatureVectorRecord(row[0], kind, int(row[1]), float(row[2]), feats)
    return out


def write_validation(path, results: list[FeatureClassifierResult]) -> None:
    rows = [(i, r.fold, lab, p) for r in results for i, lab, p in r.validation]
    write_csv(path, VALIDATION_HEADER, rows)


def read_validation(path) -> dict[int, PredictionSet]:
    """Per-fold reference sets ``{fold: PredictionSet}``."""
    by_fold: dict[int, list] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            by_fold.setdefault(int(row["fold"]), []).append((row["id"], int(row["label"]), float(row["softmax"])))
    return {
        f: PredictionSet.from_arrays([r[1] for r in rows], [r[2] for r in rows], ids=[r[0] for r in rows])
        for f, rows in by_fold.items()
    }


def write_predictions(path, ps: PredictionSet) -> None:
    write_csv(path, PREDICTIONS_HEADER, zip(ps.ids, ps.folds.tolist(), ps.repeats.tolist(), ps.labels.tolist(), ps.p_mel))


def read_predictions(path) -> PredictionSet:
    ids, folds, reps, labels, p = [], [], [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != PREDICTIONS_HEADER:
            raise PipelineError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            ids.append(row["id"])
            folds.append(int(row["fold"]))
            reps.append(int(row["repeat"]))
            labels.append(int(row["label"]))
            p.append(float(row["p_mel"]))
    return PredictionSet.from_arrays(labels, p, ids=ids, folds=folds, repeats=reps)


def feature_predictions(records: dict[str, FeatureVectorRecord], manifest: list[SampleManifest]) -> PredictionSet:
    """Softmax records as a fold-tagged prediction set against the melanoma label."""
    samples = sorted(manifest, key=lambda s: s.id)
    return PredictionSet.from_arrays(
        [s.label for s in samples],
        [records[s.id].softmax for s in samples],
        ids=[s.id for s in samples],
        folds=[records[s.id].fold for s in samples],
        repeats=[0] * len(samples),
    )


# --------------------------------------------------------------------------
# committee machine


def assemble_committee_input(records: dict, mode: CommitteeInputMode, kinds) -> np.ndarray:
    """Concatenate one sample's records in the given kind order.

    ``records`` maps kind to :class:`FeatureVectorRecord`.
    """
    mode = CommitteeInputMode(mode)
    parts = []
    for kind in kinds:
        kind = FeatureKind(kind)
        if kind not in records:
            raise PipelineError(f"missing {kind.value} record")
        r = records[kind]
        parts.append(np.array([r.softmax]) if mode is CommitteeInputMode.SOFTMAX else r.feature_layer)
    return np.concatenate(parts)


def committee_matrix(table: RecordTable, ids, mode, kinds) -> np.ndarray:
    for kind in kinds:
        if FeatureKind(kind) not in table:
            raise PipelineError(f"no records for {FeatureKind(kind).value}")
    rows = []
    for i in ids:
        try:
            per = {FeatureKind(k): table[FeatureKind(k)][i] for k in kinds}
        except KeyError:
            raise PipelineError(f"sample {i} lacks a record for one of {[FeatureKind(k).value for k in kinds]}") from None
        rows.append(assemble_committee_input(per, mode, kinds))
    return np.array(rows)


def committee_role(mode: CommitteeInputMode, kinds) -> str:
    # bias is left out on purpose: a bias sweep reuses the same inits and shuffles
    return f"committee:{CommitteeInputMode(mode).value}:" + "+".join(FeatureKind(k).value for k in kinds)


@dataclass
class CommitteeResult:
    mode: CommitteeInputMode
    bias: float
    kinds: tuple[FeatureKind, ...]
    # models[fold_index][repeat]
    models: list[list[sn.MlpModel]]
    predictions: PredictionSet


def _committee_job(args):
    X, y, Xv, yv, Xt, cfg, tc, init_seed, train_seed = args
    model, _ = _fit(X, y, Xv, yv, cfg.committee_hidden, cfg.committee_dropout, tc, init_seed, train_seed, cfg.class_weighting)
    p, _ = sn.predict(model, Xt)
    return model, p


def train_committee(
    table: RecordTable,
    manifest: list[SampleManifest],
    mode: CommitteeInputMode,
    cfg: PipelineConfig,
    bias: float = 1.0,
    repeats: int = 5,
    kinds=ALL_KINDS,
    jobs: int = 1,
) -> CommitteeResult:
    """``repeats`` committee machines per fold, pooled into one tagged prediction set."""
    if repeats < 1:
        raise PipelineError("repeats must be at least 1")
    mode = CommitteeInputMode(mode)
    kinds = tuple(FeatureKind(k) for k in kinds)
    labels = {s.id: s.label for s in manifest}
    tc = replace(cfg.committee_train, loss_bias=float(bias))
    role = committee_role(mode, kinds)
    folds = folds_of(manifest)
    work, tags = [], []
    for fold in folds:
        tr, va, test = fold_split(manifest, fold, cfg)
        check_no_leakage(test, tr, va)
        X = committee_matrix(table, tr, mode, kinds)
        Xv = committee_matrix(table, va, mode, kinds)
        Xt = committee_matrix(table, test, mode, kinds)
        y = np.array([labels[i] for i in tr], dtype=np.intp)
        yv = np.array([labels[i] for i in va], dtype=np.intp)
        for rep in range(repeats):
            seeds = (derive_seed(cfg.seed, fold, rep, role + ":init"), derive_seed(cfg.seed, fold, rep, role))
            work.append((X, y, Xv, yv, Xt, cfg, tc, *seeds))
            tags.append((fold, rep, test))
    results = _run_jobs(_committee_job, work, jobs)

    models: list[list[sn.MlpModel]] = [[] for _ in folds]
    ids, fl, rp, lab, pm = [], [], [], [], []
    for (fold, rep, test), (model, p) in zip(tags, results):
        models[folds.index(fold)].append(model)
        ids.extend(test)
        fl.extend([fold] * len(test))
        rp.extend([rep] * len(test))
        lab.extend(labels[i] for i in test)
        pm.extend(p.tolist())
    ps = PredictionSet.from_arrays(lab, pm, ids=ids, folds=fl, repeats=rp)
    return CommitteeResult(mode, float(bias), kinds, models, ps)


def ablation_names(kinds=ALL_KINDS) -> list[str]:
    return ["all"] + [f"all_except_{FeatureKind(k).value}" for k in kinds]


def ablation_run(
    table: RecordTable,
    manifest: list[SampleManifest],
    mode: CommitteeInputMode,
    cfg: PipelineConfig,
    bias: float = 1.0,
    repeats: int = 5,
    kinds=ALL_KINDS,
    jobs: int = 1,
    target_fnr: float = 0.1,
) -> list[MetricsRow]:
    """Committee metrics with all kinds, then with each kind removed in turn."""
    kinds = tuple(FeatureKind(k) for k in kinds)
    subsets = [kinds] + [tuple(k for k in kinds if k is not drop) for drop in kinds]
    rows = []
    for name, sub in zip(ablation_names(kinds), subsets):
        res = train_committee(table, manifest, mode, cfg, bias, repeats, sub, jobs)
        rows.append(metrics_row(name, res.predictions, target_fnr))
    return rows


def write_ablation_csv(path, rows: list[MetricsRow]) -> None:
    write_csv(
        path,
        ["name", "roc_auc", "best_balanced_accuracy", "fpr_at_fnr_0.1"],
        [(r.name, r.roc_auc_mean, r.best_balanced_accuracy, r.fpr_at_fnr) for r in rows],
    )


def prediction_file_name(mode: CommitteeInputMode, bias: float) -> str:
    return f"predictions_{CommitteeInputMode(mode).value}_b{fmt(float(bias))}.csv"
