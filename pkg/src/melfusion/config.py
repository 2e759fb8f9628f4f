"""Run configuration: flat ``key = value`` files with typed fields.

Precedence is command-line flags over the file over the defaults below.
The defaults are the desk-scale settings used for the synthetic
experiments (128-pixel photos, 64-pixel feature images).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from . import shallownet as sn
from .pipeline import CommitteeInputMode, PipelineConfig
from .preprocess import ALL_KINDS, FeatureKind, PreprocessConfig
from .synthetic import SyntheticParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    jobs: int = 0  # 0 means one worker per logical processor
    out: str = "run"
    manifest: str = ""  # default: <out>/data/manifest.csv

    # synthetic data
    n_samples: int = 400
    image_size: int = 128
    melanoma_fraction: float = 0.18
    ragged: float = 1.0
    asymmetry: float = 1.0
    veil: float = 0.0
    speckle: float = 0.0
    nuisance: float = 1.0
    trait_mode: str = "exclusive"
    k_folds: int = 5

    # feature images
    standard_size: int = 64
    border_out: int = 3
    border_in: int = 6
    superpixel_count: int = 625
    center_crop: int = 32
    kinds: tuple[str, ...] = tuple(k.value for k in ALL_KINDS)

    # feature classifiers
    feature_size: int = 32
    feature_hidden: tuple[int, ...] = (64, 64)
    feature_dropout: float = 0.3
    feature_learning_rate: float = 1e-4
    feature_patience: int = 20
    feature_max_epochs: int = 100
    feature_batch_size: int = 32
    feature_metric: str = "neg_loss"
    feature_weight_decay: float = 0.0
    feature_scaling: str = "global"

    # committee machine
    committee_hidden: tuple[int, ...] = (128, 64, 32)
    committee_dropout: float = 0.1
    committee_learning_rate: float = 1e-3
    committee_patience: int = 15
    committee_max_epochs: int = 200
    committee_batch_size: int = 32
    committee_metric: str = "neg_loss"
    committee_weight_decay: float = 0.1

    val_fraction: float = 0.1
    class_weighting: bool = True
    veil_target: bool = True
    augment: bool = True
    repeats: int = 5
    modes: tuple[str, ...] = ("softmax", "feature_layer")
    biases: tuple[float, ...] = (1.0, 5.0, 10.0, 20.0, 50.0, 100.0)
    ablation_mode: str = "feature_layer"
    target_fnr: float = 0.1

    def __post_init__(self):
        if self.k_folds < 2:
            raise ConfigError("k_folds must be at least 2")
        if self.repeats < 1:
            raise ConfigError("repeats must be at least 1")
        if not self.biases or any(b < 1 for b in self.biases):
            raise ConfigError("bias values must be >= 1")
        if self.jobs < 0:
            raise ConfigError("jobs must be >= 0")
        if not 0.0 < self.target_fnr < 1.0:
            raise ConfigError("target_fnr must lie in (0, 1)")
        try:
            for m in (*self.modes, self.ablation_mode):
                CommitteeInputMode.parse(m)
            for k in self.kinds:
                FeatureKind.parse(k)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not self.kinds or not self.modes:
            raise ConfigError("kinds and modes must not be empty")
        # building the sub-configs runs their own validation
        try:
            self.synthetic_params()
            self.preprocess_config()
            self.pipeline_config()
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    # ----------------------------------------------------------------------

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    @property
    def manifest_path(self) -> Path:
        return Path(self.manifest) if self.manifest else self.out_dir / "data" / "manifest.csv"

    @property
    def feature_dir(self) -> Path:
        return self.out_dir / "features"

    @property
    def train_dir(self) -> Path:
        return self.out_dir / "train"

    @property
    def eval_dir(self) -> Path:
        return self.out_dir / "eval"

    def feature_kinds(self) -> tuple[FeatureKind, ...]:
        return tuple(FeatureKind.parse(k) for k in self.kinds)

    def committee_modes(self) -> tuple[CommitteeInputMode, ...]:
        return tuple(CommitteeInputMode.parse(m) for m in self.modes)

    def synthetic_params(self) -> SyntheticParams:
        return SyntheticParams(
            n_samples=self.n_samples,
            image_size=self.image_size,
            melanoma_fraction=self.melanoma_fraction,
            ragged=self.ragged,
            asymmetry=self.asymmetry,
            veil=self.veil,
            speckle=self.speckle,
            seed=self.seed,
            k_folds=self.k_folds,
            trait_mode=self.trait_mode,
            nuisance=self.nuisance,
        )

    def preprocess_config(self) -> PreprocessConfig:
        return PreprocessConfig(
            standard_size=self.standard_size,
            border_out=self.border_out,
            border_in=self.border_in,
            superpixel_count=self.superpixel_count,
            center_crop=self.center_crop,
        )

    def _train_config(self, prefix: str) -> sn.TrainConfig:
        get = lambda name: getattr(self, f"{prefix}_{name}")  # noqa: E731
        return sn.TrainConfig(
            learning_rate=get("learning_rate"),
            patience=get("patience"),
            max_epochs=get("max_epochs"),
            batch_size=get("batch_size"),
            metric=get("metric"),
            weight_decay=get("weight_decay"),
        )

    def pipeline_config(self) -> PipelineConfig:
        return PipelineConfig(
            feature_size=self.feature_size,
            feature_hidden=self.feature_hidden,
            feature_dropout=self.feature_dropout,
            feature_train=self._train_config("feature"),
            committee_hidden=self.committee_hidden,
            committee_dropout=self.committee_dropout,
            committee_train=self._train_config("committee"),
            val_fraction=self.val_fraction,
            class_weighting=self.class_weighting,
            veil_target=self.veil_target,
            augment=self.augment,
            feature_scaling=self.feature_scaling,
            seed=self.seed,
        )


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _convert(name: str, text: str):
    default = _FIELDS[name].default
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(t) for t in items)
            if default and isinstance(default[0], float):
                return tuple(float(t) for t in items)
            return tuple(items)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {name}: {text!r}") from None


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    """``key = value`` per line; ``#`` starts a comment; list values are comma separated."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        values[key] = _convert(key, value)
    return values


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file at ``path`` (if any), then ``overrides`` (None values ignored)."""
    values = {}
    if path is not None:
        path = Path(path)
        values.update(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _FIELDS:
            raise ConfigError(f"unknown setting {key!r}")
        values[key] = _convert(key, value) if isinstance(value, str) and not isinstance(_FIELDS[key].default, str) else value
    return RunConfig(**values)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def replace_config(cfg: RunConfig, **changes) -> RunConfig:
    return dataclasses.replace(cfg, **changes)
