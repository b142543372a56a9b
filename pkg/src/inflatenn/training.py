"""Losses, Adam, class weighting and the fit loop."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, DomainError, TrainingError, UndefinedMetricError
from .graph import ModelSpec, forward_pass, model_backward
from .inflation import InflationConfig, scale_targets, unscale_predictions
from .metrics import compute_ccc
from .tensor import STORAGE_DTYPE, RngStream, checksum

LOSSES = ("mse", "weighted_cross_entropy")
# which validation CCC picks the best epoch of a regression run
SELECT = ("mean", "valence", "arousal")
LOG_HEADER = ["epoch", "split", "loss", "ccc_valence", "ccc_arousal"]


# --------------------------------------------------------------------------
# losses


def mse_loss(preds, targets):
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise DimensionError(f"mse_loss shape mismatch: {p.shape} vs {t.shape}")
    diff = p - t
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def weighted_ce_loss(logits, class_index, weights=None):
    """Softmax cross-entropy, each sample scaled by the weight of its class.

    ``logits`` is ``[K]`` or ``[N, K]``; the batch loss is the mean of the
    weighted per-sample losses.
    """
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    z2 = z[None] if single else z
    n, k = z2.shape
    idx = np.atleast_1d(np.asarray(class_index))
    if idx.shape != (n,) or not np.issubdtype(idx.dtype, np.integer):
        raise DomainError(f"need one integer class index per row, got {class_index!r}")
    if np.any(idx < 0) or np.any(idx >= k):
        raise DomainError(f"class index out of range [0, {k}): {idx}")
    w = np.ones(k) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (k,) or np.any(w <= 0):
        raise DomainError("class weights must be positive, one per class")
    shifted = z2 - z2.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsum[:, None]
    sw = w[idx]
    loss = float(np.sum(-logp[np.arange(n), idx] * sw) / n)
    grad = np.exp(logp)
    grad[np.arange(n), idx] -= 1.0
    grad *= (sw / n)[:, None]
    return loss, (grad[0] if single else grad)


def class_weights_from_counts(counts):
    """Inverse-frequency weights N / (K * n_c); balanced counts give all ones."""
    c = np.asarray(counts, dtype=np.float64)
    if c.ndim != 1 or c.size == 0:
        raise DomainError("counts must be a non-empty vector")
    if np.any(c < 1):
        raise DomainError(f"every class needs at least one sample, got counts {counts}")
    return c.sum() / (c.size * c)


# --------------------------------------------------------------------------
# Adam


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    loss: str = "mse"
    epochs: int = 10
    seed: int = 0
    class_weights: object = None
    gradient_mask: dict | None = None
    target_multiplier: float = 1.0
    eval_batch_size: int = 64
    select: str = "mean"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.select not in SELECT:
            raise ConfigError(f"select must be one of {SELECT}, got {self.select!r}")
        if not self.target_multiplier > 0:
            raise ConfigError("target multiplier must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: OptimizerState, cfg: TrainConfig, mask: dict | None = None,
              learning_rate=None):
    """One bias-corrected Adam update, in place on ``params`` (float32 storage).

    Entries whose mask is 0 keep their value bit-for-bit and their moments
    do not move.  ``learning_rate`` overrides ``cfg.learning_rate`` (0 is
    allowed here, for probing).
    """
    lr = cfg.learning_rate if learning_rate is None else float(learning_rate)
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, g in grads.items():
        if name not in params:
            raise DimensionError(f"gradient for unknown parameter {name!r}")
        p = params[name]
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros(p.shape)
            v = np.zeros(p.shape)
        m_new = b1 * m + (1.0 - b1) * g
        v_new = b2 * v + (1.0 - b2) * g * g
        step = lr * (m_new / bc1) / (np.sqrt(v_new / bc2) + cfg.epsilon)
        updated = (p.astype(np.float64) - step).astype(p.dtype)
        keep = None if mask is None else mask.get(name)
        if keep is not None:
            frozen = keep == 0
            m_new = np.where(frozen, m, m_new)
            v_new = np.where(frozen, v, v_new)
            updated = np.where(frozen, p, updated)
        state.m[name] = m_new
        state.v[name] = v_new
        params[name] = updated
    return params, state


# --------------------------------------------------------------------------
# datasets


class ArrayDataset:
    """In-memory inputs ``x[i]`` with targets ``y[i]``."""

    def __init__(self, x, y):
        self.x = np.asarray(x)
        self.y = np.asarray(y)
        if len(self.x) != len(self.y):
            raise DimensionError("inputs and targets differ in length")

    def __len__(self):
        return len(self.x)

    def batch(self, idx):
        return self.x[idx], self.y[idx]


class ClipDataset:
    """Clips gathered lazily from per-video frame arrays.

    ``layout`` is ``"cnn_lstm"`` ([N, T, C, H, W]) or ``"i3d"`` ([N, C, T, H, W]).
    """

    def __init__(self, frames_by_source: dict, clips: list, layout="cnn_lstm"):
        if layout not in ("cnn_lstm", "i3d"):
            raise ConfigError(f"unknown clip layout {layout!r}")
        self.frames = frames_by_source
        self.clips = list(clips)
        self.layout = layout
        self.y = np.array([[c.fused_valence, c.fused_arousal] for c in self.clips], dtype=np.float64)

    def __len__(self):
        return len(self.clips)

    def batch(self, idx):
        x = np.stack([self.frames[self.clips[i].source][list(self.clips[i].positions)] for i in idx])
        # [N, T, H, W, C] -> model layout
        x = x.transpose(0, 1, 4, 2, 3) if self.layout == "cnn_lstm" else x.transpose(0, 4, 1, 2, 3)
        return np.ascontiguousarray(x), self.y[idx]


# --------------------------------------------------------------------------
# fit


@dataclass
class FitResult:
    log: list
    best_weights: dict
    best_epoch: int
    best_score: float
    steps: int

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for row in self.log:
            w.writerow([row["epoch"], row["split"], _fmt(row["loss"]),
                        _fmt(row.get("ccc_valence")), _fmt(row.get("ccc_arousal"))])
        return buf.getvalue()

    def checksum(self) -> str:
        import hashlib
        return hashlib.sha256(self.log_csv().encode()).hexdigest()


def _fmt(v):
    if v is None:
        return ""
    return "nan" if isinstance(v, float) and math.isnan(v) else f"{v:.9g}"


def _safe_ccc(y, p):
    try:
        return compute_ccc(y, p)
    except UndefinedMetricError:
        return float("nan")


def predict(model: ModelSpec, data, cfg: TrainConfig, indices=None) -> np.ndarray:
    """Eval-mode outputs in label units (target multiplier undone)."""
    idx = np.arange(len(data)) if indices is None else np.asarray(indices)
    outs = []
    for start in range(0, len(idx), cfg.eval_batch_size):
        x, _ = data.batch(idx[start:start + cfg.eval_batch_size])
        out, _ = forward_pass(model, x, train_mode=False)
        outs.append(out)
    out = np.concatenate(outs) if outs else np.zeros((0, 2))
    if cfg.loss == "mse":
        out = unscale_predictions(out, InflationConfig(target_multiplier=cfg.target_multiplier))
    return out


def _regression_row(epoch, split, y, p):
    loss, _ = mse_loss(p, y)
    return {"epoch": epoch, "split": split, "loss": loss,
            "ccc_valence": _safe_ccc(y[:, 0], p[:, 0]), "ccc_arousal": _safe_ccc(y[:, 1], p[:, 1])}


def _score(row, select="mean"):
    if row.get("ccc_valence") is None:
        return -row["loss"]
    scores = [row["ccc_valence"], row["ccc_arousal"]] if select == "mean" else [row[f"ccc_{select}"]]
    return -math.inf if any(math.isnan(s) for s in scores) else float(np.mean(scores))


def fit(model: ModelSpec, train, cfg: TrainConfig, eval_split=None, *, progress=None) -> FitResult:
    """Mini-batch Adam over ``train``; the weights of ``model`` are updated in place.

    Returns the per-epoch log and the weights of the epoch with the best
    validation score (mean CCC for regression, negative loss otherwise).
    """
    if len(train) == 0:
        raise TrainingError("training split is empty")
    if eval_split is not None and len(eval_split) == 0:
        raise TrainingError("evaluation split is empty")
    regression = cfg.loss == "mse"
    infl = InflationConfig(target_multiplier=cfg.target_multiplier)
    root = RngStream(cfg.seed)
    state = OptimizerState()
    trainable = set(model.param_names())
    log = []
    best = (-math.inf, 0, {k: v.copy() for k, v in model.weights.items()})
    n = len(train)
    for epoch in range(1, cfg.epochs + 1):
        order = root.split(2 * epoch).permutation(n)
        step_rng = root.split(2 * epoch + 1)
        total, seen = 0.0, 0
        train_y, train_p = [], []
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            x, y = train.batch(idx)
            out, tape = forward_pass(model, x, train_mode=True, rng=step_rng.split(b))
            if regression:
                loss, grad = mse_loss(out, scale_targets(y, infl))
                loss /= cfg.target_multiplier ** 2
                train_y.append(y)
                train_p.append(unscale_predictions(out, infl))
            else:
                loss, grad = weighted_ce_loss(out, y, cfg.class_weights)
            if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise TrainingError(
                    f"non-finite loss {loss} at epoch {epoch}, batch {b} (samples {idx[:8].tolist()}...)")
            _, grads, updates = model_backward(model, tape, grad)
            grads = {k: v for k, v in grads.items() if k in trainable}
            adam_step(model.weights, grads, state, cfg, cfg.gradient_mask)
            for k, v in updates.items():
                model.weights[k] = v.astype(STORAGE_DTYPE)
            total += loss * len(idx)
            seen += len(idx)
        if regression:
            row = _regression_row(epoch, "train", np.concatenate(train_y), np.concatenate(train_p))
            row["loss"] = total / seen
        else:
            row = {"epoch": epoch, "split": "train", "loss": total / seen}
        log.append(row)
        if eval_split is not None:
            preds = predict(model, eval_split, cfg)
            _, ey = eval_split.batch(np.arange(len(eval_split)))
            if regression:
                erow = _regression_row(epoch, "val", ey, preds)
            else:
                erow = {"epoch": epoch, "split": "val",
                        "loss": weighted_ce_loss(preds, ey, cfg.class_weights)[0]}
            log.append(erow)
        else:
            erow = row
        score = _score(erow, cfg.select)
        if score > best[0]:
            best = (score, epoch, {k: v.copy() for k, v in model.weights.items()})
        if progress is not None:
            progress(log[-1])
    return FitResult(log, best[2], best[1], best[0], state.step)


def weights_checksum(weights: dict) -> str:
    return checksum(*[weights[k] for k in sorted(weights)])
