"""Small fully connected ReLU networks with a two-way softmax head.

Used both for the per-feature classifiers and for the committee machine.
Everything runs in float64 numpy and is seeded, so a training run is
reproducible bit for bit.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

P_CLAMP = 1e-12
_LOG_LO = math.log(P_CLAMP)
_LOG_HI = math.log1p(-P_CLAMP)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_MAGIC = b"MLPF"
_FORMAT_VERSION = 1

METRICS = ("balanced_accuracy", "accuracy", "auc", "neg_loss")


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class MlpConfig:
    layer_sizes: tuple[int, ...]
    dropout: float = 0.0
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(n) for n in self.layer_sizes))
        if len(self.layer_sizes) < 2:
            raise ShapeError("need at least an input and an output layer")
        if self.layer_sizes[-1] != 2:
            raise ShapeError("output layer must have 2 units")
        if any(n < 1 for n in self.layer_sizes):
            raise ShapeError("layer sizes must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")


@dataclass
class MlpModel:
    config: MlpConfig
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def n_inputs(self) -> int:
        return self.config.layer_sizes[0]

    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self) -> "MlpModel":
        return MlpModel(self.config, [w.copy() for w in self.weights], [b.copy() for b in self.biases])


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    patience: int = 10
    max_epochs: int = 200
    batch_size: int = 32
    # None means equal weights
    class_weights: tuple[float, float] | None = None
    loss_bias: float = 1.0
    seed: int = 0
    metric: str = "balanced_accuracy"
    # L2 penalty 0.5 * weight_decay * sum(W**2) over weight matrices (not biases)
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.patience < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("patience, max_epochs and batch_size must be at least 1")
        if self.class_weights is not None:
            if len(self.class_weights) != 2 or min(self.class_weights) <= 0:
                raise ValueError("class_weights must be two positive numbers")
        if self.loss_bias < 1:
            raise ValueError("loss_bias must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")

    def weights_array(self) -> np.ndarray:
        return np.asarray(self.class_weights if self.class_weights is not None else (1.0, 1.0), dtype=np.float64)


@dataclass
class ForwardTrace:
    pre_activations: list[np.ndarray]
    activations: list[np.ndarray]
    dropout_masks: list[np.ndarray | None]
    logits: np.ndarray
    log_probs: np.ndarray
    probs: np.ndarray

    @property
    def feature_layer(self) -> np.ndarray:
        return self.activations[-1]


@dataclass
class AdamState:
    t: int
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def zeros_like(cls, model: MlpModel) -> "AdamState":
        return cls(0, [np.zeros_like(p) for p in model.params()], [np.zeros_like(p) for p in model.params()])


@dataclass
class TrainHistory:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_metric: float = -math.inf


def init(cfg: MlpConfig) -> MlpModel:
    """He-uniform weights, zero biases, drawn from ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    weights, biases = [], []
    for n_in, n_out in zip(cfg.layer_sizes[:-1], cfg.layer_sizes[1:]):
        limit = math.sqrt(6.0 / n_in)
        weights.append(rng.uniform(-limit, limit, size=(n_in, n_out)))
        biases.append(np.zeros(n_out))
    return MlpModel(cfg, weights, biases)


def _as_batch(model: MlpModel, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != model.n_inputs:
        raise ShapeError(f"expected {model.n_inputs} inputs, got shape {x.shape}")
    return X, single


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def forward(model: MlpModel, x, train_mode: bool = False, dropout_seed=None, masks=None) -> ForwardTrace:
    """Run the net on one vector or a batch of rows.

    In train mode each hidden layer is followed by inverted dropout; the keep
    masks come from ``masks`` if given, otherwise from ``dropout_seed``.
    """
    X, _ = _as_batch(model, x)
    rate = model.config.dropout
    use_dropout = train_mode and rate > 0.0
    rng = _rng(dropout_seed) if use_dropout and masks is None else None

    pre, acts, used_masks = [], [X], []
    a = X
    n_hidden = len(model.weights) - 1
    for i in range(n_hidden):
        z = a @ model.weights[i] + model.biases[i]
        a = np.maximum(z, 0.0)
        mask = None
        if use_dropout:
            mask = masks[i] if masks is not None else (rng.random(a.shape) >= rate)
            a = a * mask / (1.0 - rate)
        pre.append(z)
        acts.append(a)
        used_masks.append(mask)
    logits = a @ model.weights[-1] + model.biases[-1]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(log_probs)
    probs /= probs.sum(axis=1, keepdims=True)
    return ForwardTrace(pre, acts, used_masks, logits, log_probs, probs)


def biased_loss(p_mel, y, b: float = 1.0):
    """``-[b y ln p + (1 - y) ln(1 - p)]`` with ``p`` clamped to ``[1e-12, 1 - 1e-12]``."""
    p = np.clip(np.asarray(p_mel, dtype=np.float64), P_CLAMP, 1.0 - P_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    out = -(b * y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return float(out) if out.ndim == 0 else out


def _per_sample_loss(log_probs: np.ndarray, y: np.ndarray, tc: TrainConfig) -> np.ndarray:
    lp = np.clip(log_probs, _LOG_LO, _LOG_HI)
    w = tc.weights_array()[y]
    return w * -(tc.loss_bias * y * lp[:, 1] + (1 - y) * lp[:, 0])


def _check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y).astype(np.intp).ravel()
    if y.size != n:
        raise ShapeError("labels and inputs differ in length")
    if y.size == 0:
        raise ValueError("empty batch")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be 0 or 1")
    return y


def batch_loss(model: MlpModel, X, y, tc: TrainConfig, train_mode: bool = False, dropout_seed=None, masks=None) -> float:
    """Mean over the batch of ``class_weight[y] * biased_loss(p_mel, y, b)``, plus the L2 penalty."""
    X, _ = _as_batch(model, X)
    y = _check_labels(y, X.shape[0])
    trace = forward(model, X, train_mode, dropout_seed, masks)
    return float(_per_sample_loss(trace.log_probs, y, tc).mean()) + _penalty(model, tc)


def _penalty(model: MlpModel, tc: TrainConfig) -> float:
    if tc.weight_decay == 0.0:
        return 0.0
    return 0.5 * tc.weight_decay * float(sum(np.sum(w * w) for w in model.weights))


def backward(model: MlpModel, X, y, tc: TrainConfig, train_mode: bool = False, dropout_seed=None, masks=None):
    """Gradient of :func:`batch_loss` for every weight and bias.

    Returns ``(grads, loss)`` with ``grads`` ordered like ``model.params()``.
    The dropout masks are drawn once and held fixed.  Where the probability
    clamp is active the loss is flat but the returned gradient is that of
    the unclamped log-softmax loss.
    """
    X, _ = _as_batch(model, X)
    y = _check_labels(y, X.shape[0])
    n = X.shape[0]
    trace = forward(model, X, train_mode, dropout_seed, masks)
    loss = float(_per_sample_loss(trace.log_probs, y, tc).mean()) + _penalty(model, tc)

    coef = tc.weights_array()[y] * np.where(y == 1, tc.loss_bias, 1.0) / n
    onehot = np.zeros_like(trace.probs)
    onehot[np.arange(n), y] = 1.0
    delta = coef[:, None] * (trace.probs - onehot)

    n_layers = len(model.weights)
    grads_w = [None] * n_layers
    grads_b = [None] * n_layers
    rate = model.config.dropout
    for i in range(n_layers - 1, -1, -1):
        a_prev = trace.activations[i]
        grads_w[i] = a_prev.T @ delta
        if tc.weight_decay:
            grads_w[i] = grads_w[i] + tc.weight_decay * model.weights[i]
        grads_b[i] = delta.sum(axis=0)
        if i == 0:
            break
        delta = delta @ model.weights[i].T
        mask = trace.dropout_masks[i - 1]
        if mask is not None:
            delta = delta * mask / (1.0 - rate)
        delta = delta * (trace.pre_activations[i - 1] > 0.0)
    grads = [g for pair in zip(grads_w, grads_b) for g in pair]
    return grads, loss


def _set_params(model: MlpModel, params: list[np.ndarray]) -> MlpModel:
    return MlpModel(model.config, list(params[0::2]), list(params[1::2]))


def adam_step(model: MlpModel, grads: list[np.ndarray], state: AdamState, lr: float):
    """One bias-corrected Adam update; returns ``(new_model, new_state)``."""
    params = model.params()
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise ShapeError("gradient shapes do not match the model")
    t = state.t + 1
    c1 = 1.0 - ADAM_BETA1**t
    c2 = 1.0 - ADAM_BETA2**t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * (g * g)
        new_params.append(p - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS))
        new_m.append(m)
        new_v.append(v)
    return _set_params(model, new_params), AdamState(t, new_m, new_v)


def predict(model: MlpModel, x) -> tuple:
    """Evaluation-mode melanoma probability and last hidden activations.

    A single vector gives ``(float, 1-D array)``; a batch gives two arrays.
    """
    X, single = _as_batch(model, x)
    trace = forward(model, X, train_mode=False)
    p = trace.probs[:, 1]
    feats = trace.feature_layer
    if single:
        return float(p[0]), feats[0]
    return p, feats


def balanced_accuracy_at(p: np.ndarray, y: np.ndarray, t: float = 0.5) -> float:
    pred = p >= t
    rates = []
    if np.any(y == 1):
        rates.append(np.mean(pred[y == 1]))
    if np.any(y == 0):
        rates.append(np.mean(~pred[y == 0]))
    return float(np.mean(rates))


def _rank_auc(p: np.ndarray, y: np.ndarray) -> float:
    pos, neg = p[y == 1], p[y == 0]
    if pos.size == 0 or neg.size == 0:
        return 0.5
    gt = (pos[:, None] > neg[None, :]).sum()
    eq = (pos[:, None] == neg[None, :]).sum()
    return float((gt + 0.5 * eq) / (pos.size * neg.size))


def validation_metric(model: MlpModel, X, y, tc: TrainConfig) -> float:
    y = np.asarray(y).astype(np.intp)
    if tc.metric == "neg_loss":
        # data term only; the weight penalty is not a validation signal
        trace = forward(model, _as_batch(model, X)[0])
        return -float(_per_sample_loss(trace.log_probs, y, tc).mean())
    p, _ = predict(model, X)
    if tc.metric == "accuracy":
        return float(np.mean((p >= 0.5) == (y == 1)))
    if tc.metric == "auc":
        return _rank_auc(p, y)
    return balanced_accuracy_at(p, y)


def train(model: MlpModel, train_set, val_set, tc: TrainConfig):
    """Minibatch Adam with seeded shuffling and dropout, early-stopped on validation.

    ``train_set`` and ``val_set`` are ``(X, y)`` pairs.  Training stops once
    the validation metric has not strictly improved for ``tc.patience``
    epochs, and the parameters of the best epoch are returned together with
    the :class:`TrainHistory`.
    """
    X, y = train_set
    Xv, yv = val_set
    X, _ = _as_batch(model, X)
    y = _check_labels(y, X.shape[0])
    Xv, _ = _as_batch(model, Xv)
    yv = _check_labels(yv, Xv.shape[0])

    rng = np.random.default_rng(tc.seed)
    state = AdamState.zeros_like(model)
    history = TrainHistory()
    best = model.copy()
    wait = 0
    n = X.shape[0]
    for epoch in range(1, tc.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, tc.batch_size):
            idx = order[start : start + tc.batch_size]
            grads, loss = backward(model, X[idx], y[idx], tc, train_mode=True, dropout_seed=rng)
            model, state = adam_step(model, grads, state, tc.learning_rate)
            total += loss * idx.size
        metric = validation_metric(model, Xv, yv, tc)
        history.epochs.append({"epoch": epoch, "train_loss": total / n, "val_metric": metric})
        if metric > history.best_metric:
            history.best_metric = metric
            history.best_epoch = epoch
            best = model.copy()
            wait = 0
        else:
            wait += 1
            if wait >= tc.patience:
                break
    return best, history


# --------------------------------------------------------------------------
# input scaling


def fit_standardizer(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-8] = 1.0
    return mean, scale


def absorb_standardizer(model: MlpModel, mean: np.ndarray, scale: np.ndarray) -> MlpModel:
    """Fold ``(x - mean) / scale`` into the first layer so the model takes raw inputs."""
    out = model.copy()
    w0 = model.weights[0] / scale[:, None]
    out.weights[0] = w0
    out.biases[0] = model.biases[0] - mean @ w0
    return out


# --------------------------------------------------------------------------
# serialization


def save_model(path, model: MlpModel) -> None:
    """Binary format: magic, version, JSON config, then little-endian float64 arrays."""
    header = json.dumps(asdict(model.config), sort_keys=True).encode("utf-8")
    with open(Path(path), "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<HI", _FORMAT_VERSION, len(header)))
        fh.write(header)
        for p in model.params():
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_model(path) -> MlpModel:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a model file")
    version, hlen = struct.unpack("<HI", data[4:10])
    if version != _FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported model format version {version}")
    cfg_dict = json.loads(data[10 : 10 + hlen].decode("utf-8"))
    cfg = MlpConfig(**cfg_dict)
    offset = 10 + hlen
    weights, biases = [], []
    for n_in, n_out in zip(cfg.layer_sizes[:-1], cfg.layer_sizes[1:]):
        for shape in ((n_in, n_out), (n_out,)):
            count = int(np.prod(shape))
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
            offset += 8 * count
            (weights if len(shape) == 2 else biases).append(arr)
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes in model file")
    return MlpModel(cfg, weights, biases)

