"""Command-line entry point: ``melfusion <command> [options]``.

Commands write into one run directory (``--out``)::

    data/       synthetic photos, masks, manifest.csv, traits.csv
    features/   feature images and index.csv
    train/      features_<kind>.csv, validation_<kind>.csv, predictions*.csv
    eval/       metrics.csv, roc_<name>.csv, roc.svg, roc_bias.svg
    ablation.csv, indications/, segmetrics.csv

Exit codes: 0 success, 2 I/O problem, 3 bad arguments or unknown ids,
4 invalid configuration.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import evalroc as ev
from . import pipeline as pl
from .config import ConfigError, RunConfig, load_config
from .imaging import fallback_segment, load_image, load_mask, seg_metrics, summarize_seg_metrics, write_seg_metrics_csv
from .manifest import ManifestError, read_manifest, stratified_kfold
from .preprocess import read_index, run_preprocess_batch
from .reporting import bar_svg, fmt, roc_svg, write_csv
from .synthetic import generate_synthetic

EXIT_OK = 0
EXIT_IO = 2
EXIT_USAGE = 3
EXIT_CONFIG = 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _say(msg: str) -> None:
    print(msg, flush=True)


def _warn(msg: str) -> None:
    print(f"warning: {msg}", file=sys.stderr, flush=True)


def _jobs(cfg: RunConfig) -> int:
    return cfg.jobs or os.cpu_count() or 1


# --------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig) -> int:
    out = cfg.out_dir / "data"
    samples, _ = generate_synthetic(cfg.synthetic_params(), out)
    n_mel = sum(s.label for s in samples)
    _say(f"wrote {len(samples)} samples ({n_mel} melanoma, {cfg.k_folds} folds) to {out / 'manifest.csv'}")
    return EXIT_OK


def _load_manifest(cfg: RunConfig):
    path = cfg.manifest_path
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    samples = read_manifest(path)
    if any(s.fold < 0 for s in samples):
        samples = stratified_kfold(samples, cfg.k_folds, cfg.seed)
    return samples


def cmd_preprocess(cfg: RunConfig) -> int:
    samples = _load_manifest(cfg)
    rows = run_preprocess_batch(samples, cfg.preprocess_config(), cfg.feature_dir, cfg.feature_kinds(), _jobs(cfg))
    failed = [r for r in rows if r[3] != "ok"]
    _say(f"wrote {len(rows) - len(failed)} feature images to {cfg.feature_dir}")
    if failed:
        _warn(f"{len(failed)} feature images failed; see {cfg.feature_dir / 'index.csv'}")
    return EXIT_OK


def _usable_manifest(cfg: RunConfig, samples):
    """Drop samples whose feature images are missing for any configured kind."""
    index_path = cfg.feature_dir / "index.csv"
    if not index_path.exists():
        raise FileNotFoundError(f"no preprocessed images: {index_path}")
    index = read_index(index_path)
    kinds = cfg.feature_kinds()
    keep = [s for s in samples if all((s.id, k) in index for k in kinds)]
    if len(keep) < len(samples):
        _warn(f"skipping {len(samples) - len(keep)} samples without feature images")
    return keep


def cmd_train(cfg: RunConfig, records_dir=None) -> int:
    samples = _load_manifest(cfg)
    pcfg = cfg.pipeline_config()
    kinds = cfg.feature_kinds()
    out = cfg.train_dir
    out.mkdir(parents=True, exist_ok=True)
    jobs = _jobs(cfg)
    if records_dir is None:
        samples = _usable_manifest(cfg, samples)
        results = pl.train_all_feature_classifiers(samples, pcfg, cfg.feature_dir, kinds, jobs)
        for kind, rs in results.items():
            pl.write_feature_records(out / f"features_{kind.value}.csv", [r for res in rs for r in res.records])
            pl.write_validation(out / f"validation_{kind.value}.csv", rs)
        _say(f"trained {len(kinds)} feature classifiers x {len(results[kinds[0]])} folds")
        records_dir = out
    table = _read_records(Path(records_dir), kinds)
    samples = [s for s in samples if all(s.id in table[k] for k in kinds)]

    default_written = False
    for mode in cfg.committee_modes():
        for bias in cfg.biases:
            res = pl.train_committee(table, samples, mode, pcfg, bias, cfg.repeats, kinds, jobs)
            pl.write_predictions(out / pl.prediction_file_name(mode, bias), res.predictions)
            if not default_written and (mode is pl.CommitteeInputMode.FEATURE_LAYER and bias == 1.0):
                pl.write_predictions(out / "predictions.csv", res.predictions)
                default_written = True
            _say(f"committee {mode.value} b={fmt(bias)}: {len(res.predictions)} predictions")
    if not default_written:
        mode, bias = cfg.committee_modes()[0], cfg.biases[0]
        (out / "predictions.csv").write_bytes((out / pl.prediction_file_name(mode, bias)).read_bytes())
    return EXIT_OK


def _read_records(directory: Path, kinds) -> dict:
    table = {}
    for kind in kinds:
        path = directory / f"features_{kind.value}.csv"
        if not path.exists():
            raise FileNotFoundError(f"missing feature records: {path}")
        table[kind] = pl.read_feature_records(path, kind)
    return table


def _run_name(mode: pl.CommitteeInputMode, bias: float) -> str:
    return f"{mode.value}_b{fmt(float(bias))}"


def cmd_evaluate(cfg: RunConfig) -> int:
    samples = _load_manifest(cfg)
    kinds = cfg.feature_kinds()
    train_dir = cfg.train_dir
    runs = []
    table = _read_records(train_dir, kinds)
    for kind in kinds:
        usable = [s for s in samples if s.id in table[kind]]
        runs.append((f"feature_{kind.value}", pl.feature_predictions(table[kind], usable)))
    for mode in cfg.committee_modes():
        for bias in cfg.biases:
            path = train_dir / pl.prediction_file_name(mode, bias)
            if not path.exists():
                raise FileNotFoundError(f"missing predictions: {path}")
            runs.append((_run_name(mode, bias), pl.read_predictions(path)))

    rows = ev.metrics_table(runs, cfg.target_fnr)
    out = cfg.eval_dir
    out.mkdir(parents=True, exist_ok=True)
    ev.write_metrics_csv(out / "metrics.csv", rows)
    for r in rows:
        ev.write_roc_csv(out / f"roc_{r.name}.csv", r.averaged.curve, r.averaged.fpr_std, r.averaged.tpr_std)

    def entry(r):
        best = ev.best_balanced_accuracy(r.averaged.curve)
        return (r.name, r.averaged.curve.fpr, r.averaged.curve.tpr, (best.fpr, best.tpr))

    guide = 1.0 - cfg.target_fnr
    main = [r for r in rows if r.name.startswith("feature_") or r.name.endswith("_b1")]
    (out / "roc.svg").write_text(roc_svg([entry(r) for r in main], guide, title="ROC (averaged over folds and repeats)"), encoding="utf-8")
    sweep = [r for r in rows if r.name.startswith("softmax_b")]
    if sweep:
        (out / "roc_bias.svg").write_text(roc_svg([entry(r) for r in sweep], guide, title="Softmax committee, loss bias sweep"), encoding="utf-8")
    for r in rows:
        _say(f"{r.name:28s} auc {r.roc_auc_mean:.4f} +- {r.roc_auc_std:.4f}  best_ba {r.best_balanced_accuracy:.4f}  fpr@fnr{cfg.target_fnr:g} {r.fpr_at_fnr:.4f}")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig) -> int:
    samples = _load_manifest(cfg)
    kinds = cfg.feature_kinds()
    table = _read_records(cfg.train_dir, kinds)
    samples = [s for s in samples if all(s.id in table[k] for k in kinds)]
    mode = pl.CommitteeInputMode.parse(cfg.ablation_mode)
    rows = pl.ablation_run(table, samples, mode, cfg.pipeline_config(), 1.0, cfg.repeats, kinds, _jobs(cfg), cfg.target_fnr)
    path = cfg.out_dir / "ablation.csv"
    pl.write_ablation_csv(path, rows)
    for r in rows:
        _say(f"{r.name:28s} auc {r.roc_auc_mean:.4f}  best_ba {r.best_balanced_accuracy:.4f}  fpr@fnr {r.fpr_at_fnr:.4f}")
    return EXIT_OK


def cmd_indicate(cfg: RunConfig, ids) -> int:
    if not ids:
        raise UsageError("give at least one sample id")
    kinds = cfg.feature_kinds()
    table = _read_records(cfg.train_dir, kinds)
    refs = {}
    for kind in kinds:
        path = cfg.train_dir / f"validation_{kind.value}.csv"
        if not path.exists():
            raise FileNotFoundError(f"missing validation predictions: {path}")
        refs[kind] = pl.read_validation(path)
    unknown = [i for i in ids if any(i not in table[k] for k in kinds)]
    if unknown:
        raise UsageError(f"unknown sample id(s): {', '.join(unknown)}")
    out = cfg.out_dir / "indications"
    out.mkdir(parents=True, exist_ok=True)
    for sid in ids:
        rows, labels, values = [], [], []
        for kind in kinds:
            rec = table[kind][sid]
            ref = refs[kind].get(rec.fold)
            if ref is None:
                raise FileNotFoundError(f"no validation predictions for fold {rec.fold} ({kind.value})")
            pct = ev.indication_percentile(rec.softmax, ref)
            rows.append((kind.value, rec.softmax, pct))
            labels.append(kind.value)
            values.append(pct)
        write_csv(out / f"indications_{sid}.csv", ["kind", "softmax", "percentile"], rows)
        (out / f"indications_{sid}.svg").write_text(bar_svg(labels, values, 100.0, f"Indications for {sid} (percentile)"), encoding="utf-8")
        _say(sid + ": " + ", ".join(f"{k} {v:.0f}" for k, v in zip(labels, values)))
    return EXIT_OK


def cmd_segmetrics(cfg: RunConfig, pred_dir=None) -> int:
    samples = _load_manifest(cfg)
    rows = []
    for s in samples:
        truth = load_mask(s.mask_path)
        if pred_dir is None:
            pred = fallback_segment(load_image(s.image_path))
        else:
            path = Path(pred_dir) / f"{s.id}.png"
            if not path.exists():
                raise FileNotFoundError(f"missing predicted mask: {path}")
            pred = load_mask(path)
        rows.append((s.id, seg_metrics(pred, truth)))
    path = cfg.out_dir / "segmetrics.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    write_seg_metrics_csv(path, rows, summary=True)
    mean_iou, mean_dice, empty = summarize_seg_metrics([m for _, m in rows])
    median = float(np.median([m.iou for _, m in rows])) if rows else 0.0
    _say(f"{len(rows)} masks: mean IoU {mean_iou:.4f}, mean Dice {mean_dice:.4f}, median IoU {median:.4f}, empty rate {empty:.4f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def _csv_list(text: str) -> str:
    if not text.strip():
        raise argparse.ArgumentTypeError("empty list")
    return text


def _common(suppress: bool) -> argparse.ArgumentParser:
    # flags are accepted before or after the command; inside the command parser
    # they default to SUPPRESS so they do not clobber values given earlier
    d = {"default": argparse.SUPPRESS} if suppress else {}
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value settings file", **d)
    common.add_argument("--seed", type=int, help="master seed", **d)
    common.add_argument("--out", help="run directory (default: run)", **d)
    common.add_argument("--jobs", type=int, help="worker processes (default: logical processors)", **d)
    common.add_argument("--manifest", help="manifest.csv to use instead of <out>/data/manifest.csv", **d)
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key", **d)
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="melfusion", description="Melanoma feature-classifier fusion at desk scale.", parents=[_common(False)])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _common(True)

    p = sub.add_parser("synth", parents=[common], help="render a synthetic lesion dataset")
    p.add_argument("--n", dest="n_samples", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--melanoma-fraction", type=float)
    for name in ("ragged", "asymmetry", "veil", "speckle", "nuisance"):
        p.add_argument(f"--{name}", type=float, help=f"{name} effect strength")
    p.add_argument("--trait-mode", choices=["exclusive", "all"])
    p.add_argument("--k", dest="k_folds", type=int, help="number of folds")

    p = sub.add_parser("preprocess", parents=[common], help="write feature images")
    p.add_argument("--kinds", type=_csv_list)

    p = sub.add_parser("train", parents=[common], help="train feature classifiers and committee machines")
    p.add_argument("--kinds", type=_csv_list)
    p.add_argument("--modes", type=_csv_list)
    p.add_argument("--bias", dest="biases", type=_csv_list, help="comma-separated loss bias values")
    p.add_argument("--repeats", type=int)
    p.add_argument("--records", help="directory with precomputed features_<kind>.csv; skips feature training")

    p = sub.add_parser("evaluate", parents=[common], help="metrics, ROC curves and plots")
    p.add_argument("--kinds", type=_csv_list)
    p.add_argument("--modes", type=_csv_list)
    p.add_argument("--bias", dest="biases", type=_csv_list)

    p = sub.add_parser("ablate", parents=[common], help="committee with each feature classifier removed")
    p.add_argument("--kinds", type=_csv_list)
    p.add_argument("--mode", dest="ablation_mode")
    p.add_argument("--repeats", type=int)

    p = sub.add_parser("indicate", parents=[common], help="per-sample feature percentiles")
    p.add_argument("ids", nargs="+")
    p.add_argument("--kinds", type=_csv_list)

    p = sub.add_parser("segmetrics", parents=[common], help="IoU / Dice / empty rate of predicted masks")
    p.add_argument("--pred", help="directory of predicted <id>.png masks (default: fallback segmenter)")
    return parser


_NOT_CONFIG = {"command", "config", "set", "records", "ids", "pred"}


def config_from_args(args) -> RunConfig:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip().replace("-", "_")] = value
    for key, value in vars(args).items():
        if key not in _NOT_CONFIG and value is not None:
            overrides[key] = value
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "preprocess":
            return cmd_preprocess(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.records)
        if args.command == "evaluate":
            return cmd_evaluate(cfg)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        if args.command == "indicate":
            return cmd_indicate(cfg, args.ids)
        if args.command == "segmetrics":
            return cmd_segmetrics(cfg, args.pred)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ManifestError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    parser.error(f"unknown command {args.command}")
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
