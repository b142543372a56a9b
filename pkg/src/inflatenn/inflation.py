"""2D -> 3D weight inflation.

Four knobs shape the transfer: how the 2D kernel is placed along time
(``mode``: centered or copied), how the off-center slices start
(``off_center_init``: zero or random), whether the center slice is frozen
during training (``masking``) and the per-block temporal dilation.  A fifth,
``target_multiplier``, rescales regression targets.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, UnsupportedLayerError
from .graph import HEAD_KINDS, LayerSpec, ModelSpec
from .tensor import STORAGE_DTYPE, as_rng

MODES = ("centered", "copied")
INITS = ("zero", "random")

# layers that pass through inflation; their head counterparts are dropped
_INFLATABLE = ("conv2d", "batchnorm", "maxpool", "relu", "dropout", "skip_add")
_DROPPABLE_HEAD = ("flatten", "globalavgpool", "dense", "relu", "dropout")


@dataclass(frozen=True)
class InflationConfig:
    mode: str = "centered"
    off_center_init: str = "zero"
    masking: bool = False
    dilation_schedule: tuple = (1, 1, 1, 1)
    target_multiplier: float = 1.0
    temporal_extent: int = 3
    copied_rescale: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"inflation mode must be one of {MODES}, got {self.mode!r}")
        if self.off_center_init not in INITS:
            raise ConfigError(f"off-center init must be one of {INITS}, got {self.off_center_init!r}")
        n = self.temporal_extent
        if not isinstance(n, (int, np.integer)) or n < 1 or n % 2 == 0:
            raise ConfigError(f"temporal extent must be an odd positive integer, got {n!r}")
        sched = tuple(int(d) for d in self.dilation_schedule)
        if len(sched) != 4 or any(d < 1 for d in sched):
            raise ConfigError(f"dilation schedule needs 4 positive integers, got {self.dilation_schedule!r}")
        object.__setattr__(self, "dilation_schedule", sched)
        if not self.target_multiplier > 0:
            raise ConfigError(f"target multiplier must be positive, got {self.target_multiplier!r}")


# the two configurations compared in the experiments
C1 = InflationConfig("centered", "random", False, (1, 1, 1, 1), 1.0)
C2 = InflationConfig("copied", "zero", True, (1, 2, 4, 8), 100.0)


def inflate_kernel(w2d, cfg: InflationConfig, rng=None) -> np.ndarray:
    """[out, in, kh, kw] -> [out, in, n, kh, kw]."""
    w2d = np.asarray(w2d, dtype=STORAGE_DTYPE)
    n = cfg.temporal_extent
    if n % 2 == 0:
        raise ConfigError(f"temporal extent must be odd, got {n}")
    out = np.zeros(w2d.shape[:2] + (n,) + w2d.shape[2:], dtype=STORAGE_DTYPE)
    if cfg.mode == "copied":
        # off_center_init has nothing to initialize here
        slice_ = w2d / n if cfg.copied_rescale else w2d
        out[:] = slice_[:, :, None]
        return out
    center = n // 2
    out[:, :, center] = w2d
    if cfg.off_center_init == "random" and n > 1:
        std = float(np.std(w2d, dtype=np.float64))
        half_width = np.sqrt(3.0) * std  # uniform(-a, a) has std a / sqrt(3)
        others = [t for t in range(n) if t != center]
        if half_width > 0:
            noise = as_rng(rng).uniform((w2d.shape[0], w2d.shape[1], len(others)) + w2d.shape[2:],
                                        -half_width, half_width)
            out[:, :, others] = noise.astype(STORAGE_DTYPE)
    return out


def inflate_model(model2d: ModelSpec, cfg: InflationConfig, rng=None) -> ModelSpec:
    """Inflate the convolutional trunk of ``model2d``; any dense head is dropped."""
    if model2d.arch != "2d":
        raise UnsupportedLayerError(f"can only inflate 2d models, got arch {model2d.arch!r}")
    rng = as_rng(rng)
    head_start = next((i for i, l in enumerate(model2d.layers) if l.kind in HEAD_KINDS),
                      len(model2d.layers))
    for spec in model2d.layers[head_start:]:
        if spec.kind not in _DROPPABLE_HEAD:
            raise UnsupportedLayerError(f"layer {spec.name!r} of kind {spec.kind!r} cannot be inflated")
    layers, weights = [], {}
    for i, spec in enumerate(model2d.layers[:head_start]):
        if spec.kind not in _INFLATABLE:
            raise UnsupportedLayerError(f"layer {spec.name!r} of kind {spec.kind!r} cannot be inflated")
        p = dict(spec.params)
        if spec.kind == "conv2d":
            block = p.get("block", _block_of(model2d, i))
            p.update(kt=cfg.temporal_extent, temporal_dilation=cfg.dilation_schedule[block], block=block)
            layers.append(LayerSpec("conv3d", spec.name, p))
            weights[f"{spec.name}.weight"] = inflate_kernel(
                model2d.weights[f"{spec.name}.weight"], cfg, rng.split(i))
            weights[f"{spec.name}.bias"] = model2d.weights[f"{spec.name}.bias"].copy()
        elif spec.kind == "batchnorm":
            p["channel_axis"] = -4
            layers.append(LayerSpec("batchnorm", spec.name, p))
            for n in ("gamma", "beta", "running_mean", "running_var"):
                weights[f"{spec.name}.{n}"] = model2d.weights[f"{spec.name}.{n}"].copy()
        else:
            # maxpool already pools only the two spatial axes (1x2x2 on clips)
            layers.append(LayerSpec(spec.kind, spec.name, p))
    return ModelSpec(input_shape=model2d.input_shape, layers=layers, weights=weights,
                     block_boundaries=[b for b in model2d.block_boundaries if b < head_start],
                     arch="i3d")


def _block_of(model, index):
    bounds = model.block_boundaries or [0]
    block = 0
    for b, start in enumerate(bounds):
        if index >= start:
            block = b
    return min(block, 3)


def build_gradient_mask(model3d: ModelSpec, cfg: InflationConfig) -> dict:
    """Per-parameter 0/1 masks; 0 marks frozen entries."""
    masks = {name: np.ones(model3d.weights[name].shape, dtype=STORAGE_DTYPE)
             for name in model3d.param_names()}
    for spec in model3d.layers:
        if spec.kind != "conv3d":
            continue
        name = f"{spec.name}.weight"
        kt = model3d.weights[name].shape[2]
        if kt != cfg.temporal_extent:
            raise ConfigError(
                f"layer {spec.name!r} has temporal extent {kt}, config says {cfg.temporal_extent}")
        if cfg.masking:
            masks[name][:, :, kt // 2] = 0.0
    return masks


def freeze_blocks_mask(model: ModelSpec, first_trainable_block: int, base: dict | None = None) -> dict:
    """Freeze every conv/batchnorm parameter in blocks before ``first_trainable_block``."""
    masks = base if base is not None else {
        name: np.ones(model.weights[name].shape, dtype=STORAGE_DTYPE) for name in model.param_names()}
    bounds = model.block_boundaries
    if first_trainable_block <= 0 or not bounds:
        return masks
    stop = bounds[first_trainable_block] if first_trainable_block < len(bounds) else None
    for i, spec in enumerate(model.layers):
        if stop is not None and i >= stop:
            break
        if spec.kind in ("conv2d", "conv3d", "batchnorm"):
            for name in masks:
                if name.startswith(spec.name + "."):
                    masks[name][...] = 0.0
    return masks


def scale_targets(labels, cfg: InflationConfig):
    if not cfg.target_multiplier > 0:
        raise ConfigError("target multiplier must be positive")
    return np.asarray(labels, dtype=np.float64) * cfg.target_multiplier


def unscale_predictions(preds, cfg: InflationConfig):
    if not cfg.target_multiplier > 0:
        raise ConfigError("target multiplier must be positive")
    return np.asarray(preds, dtype=np.float64) / cfg.target_multiplier
