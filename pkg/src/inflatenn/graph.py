"""Declarative model descriptions, builders and whole-model execution.

A :class:`ModelSpec` is an ordered list of :class:`LayerSpec` plus a flat map
of named weights.  Three input layouts exist, selected by ``arch``:

``"2d"``        frames ``[N, C, H, W]``
``"cnn_lstm"``  clips ``[N, T, C, H, W]`` (trunk applied per frame)
``"i3d"``       clips ``[N, C, T, H, W]``
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import layers as L
from .errors import CompositionError, ConfigError, DimensionError, StateError
from .tensor import STORAGE_DTYPE, RngStream, as_rng

LAYER_KINDS = (
    "conv2d", "conv3d", "batchnorm", "relu", "maxpool", "globalavgpool",
    "flatten", "dense", "lstm", "dropout", "skip_add",
)
HEAD_KINDS = ("flatten", "globalavgpool", "dense", "lstm")

# which weights of each kind are trained (the rest are buffers)
_PARAM_NAMES = {
    "conv2d": ("weight", "bias"),
    "conv3d": ("weight", "bias"),
    "dense": ("weight", "bias"),
    "batchnorm": ("gamma", "beta"),
    "lstm": ("w_x", "w_h", "bias"),
}
_BUFFER_NAMES = {"batchnorm": ("running_mean", "running_var")}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r} for layer {self.name!r}")


@dataclass(frozen=True)
class ClassificationHead:
    fc: tuple = (512, 128)
    classes: int = 7


@dataclass(frozen=True)
class RegressionHead:
    fc: tuple = (512, 256)
    outputs: int = 2


@dataclass
class ModelSpec:
    input_shape: tuple = (100, 80, 3)  # frame H, W, C
    layers: list = field(default_factory=list)
    weights: dict = field(default_factory=dict)
    block_boundaries: list = field(default_factory=list)
    arch: str = "2d"

    def __post_init__(self):
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise ConfigError(f"duplicate layer names: {dup}")
        for i, layer in enumerate(self.layers):
            if layer.kind == "skip_add":
                target = layer.params.get("target")
                if target not in names[:i]:
                    raise ConfigError(
                        f"skip_add {layer.name!r} must target an earlier layer, got {target!r}")

    def layer_index(self, name):
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i
        raise KeyError(name)

    def param_names(self, trainable=True):
        out = []
        for layer in self.layers:
            names = _PARAM_NAMES.get(layer.kind, ()) if trainable else \
                _PARAM_NAMES.get(layer.kind, ()) + _BUFFER_NAMES.get(layer.kind, ())
            out.extend(f"{layer.name}.{n}" for n in names)
        return out

    def buffer_names(self):
        return [f"{l.name}.{n}" for l in self.layers for n in _BUFFER_NAMES.get(l.kind, ())]

    def copy(self):
        return replace(self, layers=list(self.layers),
                       weights={k: v.copy() for k, v in self.weights.items()},
                       block_boundaries=list(self.block_boundaries))


def count_params(model: ModelSpec, trainable=True) -> int:
    return int(sum(model.weights[n].size for n in model.param_names(trainable)))


# --------------------------------------------------------------------------
# construction helpers


def _he_uniform(rng, shape, fan_in):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(shape, -limit, limit).astype(STORAGE_DTYPE)


def init_layer_weights(spec: LayerSpec, rng: RngStream) -> dict:
    """Seeded fan-in-scaled uniform weights for one layer; biases start at zero."""
    p = spec.params
    k = spec.kind
    zeros = lambda n: np.zeros(n, dtype=STORAGE_DTYPE)
    if k == "conv2d":
        shape = (p["out_ch"], p["in_ch"], p["kernel"], p["kernel"])
        return {"weight": _he_uniform(rng, shape, p["in_ch"] * p["kernel"] ** 2),
                "bias": zeros(p["out_ch"])}
    if k == "conv3d":
        shape = (p["out_ch"], p["in_ch"], p["kt"], p["kernel"], p["kernel"])
        return {"weight": _he_uniform(rng, shape, p["in_ch"] * p["kt"] * p["kernel"] ** 2),
                "bias": zeros(p["out_ch"])}
    if k == "dense":
        return {"weight": _he_uniform(rng, (p["out_features"], p["in_features"]), p["in_features"]),
                "bias": zeros(p["out_features"])}
    if k == "batchnorm":
        c = p["channels"]
        return {"gamma": np.ones(c, STORAGE_DTYPE), "beta": zeros(c),
                "running_mean": zeros(c), "running_var": np.ones(c, STORAGE_DTYPE)}
    if k == "lstm":
        h, f = p["hidden_size"], p["input_size"]
        lim = 1.0 / np.sqrt(h)
        bias = zeros(4 * h)
        bias[h:2 * h] = 1.0  # forget gate starts open
        return {"w_x": rng.uniform((4 * h, f), -lim, lim).astype(STORAGE_DTYPE),
                "w_h": rng.uniform((4 * h, h), -lim, lim).astype(STORAGE_DTYPE),
                "bias": bias}
    return {}


def _init_missing(model: ModelSpec, rng: RngStream):
    for i, spec in enumerate(model.layers):
        names = _PARAM_NAMES.get(spec.kind, ()) + _BUFFER_NAMES.get(spec.kind, ())
        if names and not all(f"{spec.name}.{n}" in model.weights for n in names):
            for n, w in init_layer_weights(spec, rng.split(i)).items():
                model.weights[f"{spec.name}.{n}"] = w
    return model


# --------------------------------------------------------------------------
# builders

SCALES = {
    # widths per block, convs per block, frame (H, W, C)
    "desk": {"widths": (8, 16, 32, 64), "convs": (1, 1, 1, 1), "input": (32, 24, 3),
             "cls_fc": (32, 16), "lstm": 64, "cascade_fc": (32, 16), "i3d_fc": (32,)},
    "paper": {"widths": (64, 128, 256, 512), "convs": (2, 2, 3, 6), "input": (100, 80, 3),
              "cls_fc": (512, 128), "lstm": 1024, "cascade_fc": (512, 256), "i3d_fc": (512,)},
}


def _scale(scale):
    try:
        return SCALES[scale]
    except KeyError:
        raise ConfigError(f"unknown scale {scale!r}; expected one of {sorted(SCALES)}") from None


def _trunk_layers(widths, convs, in_ch, batchnorm=False, residual=False):
    layers, bounds = [], []
    c = in_ch
    for b, (width, n) in enumerate(zip(widths, convs)):
        if b:
            layers.append(LayerSpec("maxpool", f"pool{b}", {"window": [2, 2]}))
        bounds.append(len(layers))
        for j in range(n):
            name = f"conv{b + 1}_{j + 1}"
            layers.append(LayerSpec("conv2d", name, {
                "in_ch": c, "out_ch": width, "kernel": 3, "stride": 1, "padding": 1, "block": b}))
            if batchnorm:
                layers.append(LayerSpec("batchnorm", f"bn{b + 1}_{j + 1}",
                                        {"channels": width, "channel_axis": -3}))
            if residual and j > 0:
                layers.append(LayerSpec("skip_add", f"add{b + 1}_{j + 1}",
                                        {"target": f"relu{b + 1}_{j}"}))
            layers.append(LayerSpec("relu", f"relu{b + 1}_{j + 1}"))
            c = width
    return layers, bounds


def _dense_stack(in_features, sizes, outputs, prefix="fc", dropout=0.0):
    layers = []
    f = in_features
    for i, size in enumerate(sizes):
        layers.append(LayerSpec("dense", f"{prefix}{i + 1}", {"in_features": f, "out_features": size}))
        layers.append(LayerSpec("relu", f"{prefix}{i + 1}_relu"))
        if dropout:
            layers.append(LayerSpec("dropout", f"{prefix}{i + 1}_drop", {"rate": dropout}))
        f = size
    layers.append(LayerSpec("dense", f"{prefix}_out", {"in_features": f, "out_features": outputs}))
    return layers


def build_vgg_mini(scale="desk", head=None, *, batchnorm=False, residual=False, seed=0,
                   convs=None) -> ModelSpec:
    """VGG-style 2D model with four conv blocks separated by 2x2 max pooling.

    ``head`` is a ClassificationHead, a RegressionHead or None for the
    convolutional trunk alone.  ``residual=True`` adds a skip connection
    around every second conv of a block (needs ``convs`` >= 2 per block).
    """
    prof = _scale(scale)
    h, w, c = prof["input"]
    layers, bounds = _trunk_layers(prof["widths"], convs or prof["convs"], c, batchnorm, residual)
    if head is not None:
        trunk = ModelSpec(input_shape=(h, w, c), layers=list(layers))
        _init_missing(trunk, RngStream(seed))
        _, oc, oh, ow = infer_shapes(trunk, (1, c, h, w))[-1]
        flat = oc * oh * ow
        layers.append(LayerSpec("flatten", "flatten", {"keep": 1}))
        if isinstance(head, ClassificationHead):
            layers += _dense_stack(flat, head.fc, head.classes)
        elif isinstance(head, RegressionHead):
            layers += _dense_stack(flat, head.fc, head.outputs)
        else:
            raise ConfigError(f"unknown head {head!r}")
    model = ModelSpec(input_shape=(h, w, c), layers=layers, block_boundaries=bounds, arch="2d")
    return _init_missing(model, RngStream(seed))


def has_head(model: ModelSpec) -> bool:
    return any(l.kind in HEAD_KINDS for l in model.layers)


def strip_head(model: ModelSpec) -> ModelSpec:
    """The convolutional trunk: every layer before the first head-kind layer."""
    for i, layer in enumerate(model.layers):
        if layer.kind in HEAD_KINDS:
            break
    else:
        i = len(model.layers)
    kept = model.layers[:i]
    names = {f"{l.name}.{n}" for l in kept
             for n in _PARAM_NAMES.get(l.kind, ()) + _BUFFER_NAMES.get(l.kind, ())}
    return ModelSpec(input_shape=model.input_shape, layers=list(kept),
                     weights={k: v.copy() for k, v in model.weights.items() if k in names},
                     block_boundaries=[b for b in model.block_boundaries if b < i] or [],
                     arch=model.arch)


def _trunk_output(model: ModelSpec, frame_shape):
    h, w, c = frame_shape
    shapes = infer_shapes(model, (1, c, h, w))
    return shapes[-1]


def build_cnn_lstm(base2d: ModelSpec, lstm_units=None, fc_sizes=None, *, scale="desk",
                   dropout=0.2, recurrent_dropout=0.2, seed=0) -> ModelSpec:
    """Per-frame 2D trunk -> flattened features -> LSTM -> three FC layers -> 2 outputs."""
    if has_head(base2d):
        raise CompositionError("build_cnn_lstm needs a convolutional trunk; strip the head first")
    if base2d.arch != "2d":
        raise CompositionError(f"base model must be 2d, got {base2d.arch!r}")
    prof = _scale(scale)
    lstm_units = lstm_units or prof["lstm"]
    fc_sizes = tuple(fc_sizes or prof["cascade_fc"])
    _, c, h, w = _trunk_output(base2d, base2d.input_shape)
    feat = c * h * w
    layers = list(base2d.layers)
    layers.append(LayerSpec("flatten", "flatten", {"keep": 2}))
    layers.append(LayerSpec("lstm", "lstm", {
        "input_size": feat, "hidden_size": lstm_units,
        "dropout": dropout, "recurrent_dropout": recurrent_dropout}))
    layers += _dense_stack(lstm_units, fc_sizes, 2)
    model = ModelSpec(input_shape=base2d.input_shape, layers=layers,
                      weights={k: v.copy() for k, v in base2d.weights.items()},
                      block_boundaries=list(base2d.block_boundaries), arch="cnn_lstm")
    return _init_missing(model, RngStream(seed).split(1))


def build_i3d(base2d: ModelSpec, cfg, *, scale="desk", fc_sizes=None, seed=0, rng=None) -> ModelSpec:
    """Inflate the 2D trunk of ``base2d`` and attach a two-layer regression head."""
    from .inflation import inflate_model

    prof = _scale(scale)
    fc_sizes = tuple(fc_sizes or prof["i3d_fc"])
    rng = as_rng(rng if rng is not None else seed)
    trunk3d = inflate_model(base2d, cfg, rng.split(0))
    h, w, c = trunk3d.input_shape
    out = infer_shapes(trunk3d, (1, c, max(16, cfg.temporal_extent), h, w))[-1]
    layers = list(trunk3d.layers)
    layers.append(LayerSpec("globalavgpool", "gap", {"channel_axis": -4}))
    layers += _dense_stack(out[1], fc_sizes, 2)
    model = replace(trunk3d, layers=layers, weights=dict(trunk3d.weights))
    return _init_missing(model, rng.split(1))


# --------------------------------------------------------------------------
# execution


def make_layer(spec: LayerSpec, weights: dict, dtype=np.float64):
    p = spec.params
    k = spec.kind

    def w(n):
        key = f"{spec.name}.{n}"
        if key not in weights:
            raise StateError(f"layer {spec.name!r} has no weight entry {key!r}")
        return weights[key].astype(dtype, copy=False)

    if k == "conv2d":
        return L.Conv2DLayer(w("weight"), w("bias"), p.get("stride", 1), p.get("padding", 1))
    if k == "conv3d":
        return L.Conv3DLayer(w("weight"), w("bias"), p.get("stride", 1), p.get("padding", 1),
                             p.get("temporal_dilation", 1), p.get("temporal_padding"))
    if k == "dense":
        return L.DenseLayer(w("weight"), w("bias"))
    if k == "batchnorm":
        return L.BatchNormLayer(w("gamma"), w("beta"), w("running_mean"), w("running_var"),
                                p.get("eps", 1e-5), p.get("momentum", 0.1), p.get("channel_axis", -3))
    if k == "lstm":
        return L.LSTMLayer(w("w_x"), w("w_h"), w("bias"), p.get("dropout", 0.0),
                           p.get("recurrent_dropout", 0.0), return_sequences=p.get("return_sequences", False))
    if k == "relu":
        return L.ReLULayer()
    if k == "dropout":
        return L.DropoutLayer(p.get("rate", 0.5))
    if k == "maxpool":
        return L.MaxPoolLayer(tuple(p.get("window", (2, 2))))
    if k == "globalavgpool":
        return L.GlobalAvgPoolLayer(p.get("channel_axis", -3))
    if k == "flatten":
        return L.FlattenLayer(p.get("keep", 1))
    return None  # skip_add is handled by the executor


def batch_shape_for(model: ModelSpec, n=1, t=None):
    h, w, c = model.input_shape
    if model.arch == "2d":
        return (n, c, h, w)
    if t is None:
        raise ConfigError(f"{model.arch} models need a clip length")
    return (n, t, c, h, w) if model.arch == "cnn_lstm" else (n, c, t, h, w)


def _check_input(model, shape):
    h, w, c = model.input_shape
    if model.arch == "2d":
        ok = len(shape) == 4 and tuple(shape[1:]) == (c, h, w)
    elif model.arch == "cnn_lstm":
        ok = len(shape) == 5 and tuple(shape[2:]) == (c, h, w)
    else:
        ok = len(shape) == 5 and shape[1] == c and tuple(shape[3:]) == (h, w)
    if not ok:
        raise DimensionError(
            f"input batch {tuple(shape)} does not match {model.arch} model with frame {model.input_shape}")


def infer_shapes(model: ModelSpec, batch_shape) -> list:
    """Predicted output shape of every layer, in order."""
    shapes = []
    cur = tuple(batch_shape)
    for spec in model.layers:
        try:
            if spec.kind == "skip_add":
                other = shapes[model.layer_index(spec.params["target"])]
                if other != cur:
                    raise DimensionError(f"skip_add shapes differ: {other} vs {cur}")
            else:
                cur = tuple(make_layer(spec, model.weights).out_shape(cur))
        except DimensionError as exc:
            raise DimensionError(f"layer {spec.name!r} ({spec.kind}): {exc}") from None
        shapes.append(cur)
    return shapes


@dataclass
class Tape:
    layers: list
    caches: list
    input_shape: tuple


def forward_pass(model: ModelSpec, batch, train_mode=False, rng=None, check=True):
    """Run every layer in float64; returns (output, tape)."""
    x = np.asarray(batch, dtype=np.float64)
    if check and model.layers:
        _check_input(model, x.shape)
    rng = as_rng(rng)
    outputs, built, caches = [], [], []
    for i, spec in enumerate(model.layers):
        if spec.kind == "skip_add":
            other = outputs[model.layer_index(spec.params["target"])]
            if other.shape != x.shape:
                raise DimensionError(f"layer {spec.name!r} (skip_add): shapes {other.shape} vs {x.shape}")
            x = x + other
            built.append(None)
            caches.append({"_kind": "skip_add"})
        else:
            layer = make_layer(spec, model.weights)
            try:
                x, cache = layer.forward(x, train=train_mode, rng=rng.split(i))
            except DimensionError as exc:
                raise DimensionError(f"layer {spec.name!r} ({spec.kind}): {exc}") from None
            built.append(layer)
            caches.append(cache)
        outputs.append(x)
    return x, Tape(built, caches, tuple(np.shape(batch)))


def model_forward(model: ModelSpec, batch, train_mode=False, rng=None) -> np.ndarray:
    out, _ = forward_pass(model, batch, train_mode, rng)
    return out.astype(STORAGE_DTYPE)


def model_backward(model: ModelSpec, tape: Tape, grad_out):
    """Backpropagate through a recorded forward pass.

    Returns ``(grad_input, grads, buffer_updates)``; ``grads`` maps trainable
    weight names to float64 gradients, ``buffer_updates`` carries new batch
    norm running statistics from a train-mode pass.
    """
    if len(tape.caches) != len(model.layers):
        raise StateError("tape does not belong to this model")
    g = np.asarray(grad_out, dtype=np.float64)
    grads, updates = {}, {}
    pending = {}
    for i in reversed(range(len(model.layers))):
        spec = model.layers[i]
        if i in pending:
            g = g + pending.pop(i)
        if spec.kind == "skip_add":
            t = model.layer_index(spec.params["target"])
            pending[t] = pending.get(t, 0) + g
            continue
        layer, cache = tape.layers[i], tape.caches[i]
        g, gp = L.layer_backward(layer, cache, g)
        for n, v in gp.items():
            grads[f"{spec.name}.{n}"] = v
        for n, v in cache.get("updates", {}).items():
            updates[f"{spec.name}.{n}"] = v
    return g, grads, updates


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_proba(model: ModelSpec, batch) -> np.ndarray:
    return softmax(forward_pass(model, batch)[0])


# --------------------------------------------------------------------------
# manifest text


def describe(model: ModelSpec) -> str:
    lines = [
        f"arch = {model.arch}",
        "input_shape = " + " ".join(str(v) for v in model.input_shape),
        "block_boundaries = " + " ".join(str(b) for b in model.block_boundaries),
        f"num_layers = {len(model.layers)}",
        f"trainable_params = {count_params(model)}",
        "[layers]",
    ]
    for spec in model.layers:
        params = " ".join(f"{k}={json.dumps(v, separators=(',', ':'))}" for k, v in sorted(spec.params.items()))
        lines.append(f"{spec.name} {spec.kind} {params}".rstrip())
    lines.append("[weights]")
    for name in sorted(model.weights):
        w = model.weights[name]
        lines.append(f"{name} rank={w.ndim} shape={'x'.join(str(s) for s in w.shape)}")
    return "\n".join(lines) + "\n"


def parse_manifest(text: str, weights: dict | None = None) -> ModelSpec:
    header, layers, section = {}, [], None
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line in ("[layers]", "[weights]"):
            section = line
            continue
        if section is None:
            key, _, value = line.partition("=")
            header[key.strip()] = value.strip()
        elif section == "[layers]":
            name, kind, *rest = line.split(" ")
            params = {}
            for item in rest:
                k, _, v = item.partition("=")
                params[k] = json.loads(v)
            layers.append(LayerSpec(kind, name, params))
    try:
        return ModelSpec(
            input_shape=tuple(int(v) for v in header["input_shape"].split()),
            layers=layers,
            weights=dict(weights or {}),
            block_boundaries=[int(v) for v in header.get("block_boundaries", "").split()],
            arch=header["arch"],
        )
    except KeyError as exc:
        raise ConfigError(f"manifest is missing {exc.args[0]!r}") from None
