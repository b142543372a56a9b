import numpy as np
import pytest

from inflatenn.errors import CompositionError, ConfigError, DimensionError, UnsupportedLayerError
from inflatenn.gradcheck import numeric_grad, relative_error
from inflatenn.graph import (ClassificationHead, LayerSpec, ModelSpec, RegressionHead, build_cnn_lstm, build_i3d,
                             build_vgg_mini, count_params, describe, forward_pass, infer_shapes, model_backward,
                             model_forward, parse_manifest, predict_proba, strip_head)
from inflatenn.inflation import InflationConfig, inflate_model
from inflatenn.tensor import RngStream


def closed_form_params(model):
    total = 0
    for spec in model.layers:
        p = spec.params
        if spec.kind == "conv2d":
            total += p["out_ch"] * p["in_ch"] * p["kernel"] ** 2 + p["out_ch"]
        elif spec.kind == "conv3d":
            total += p["out_ch"] * p["in_ch"] * p["kt"] * p["kernel"] ** 2 + p["out_ch"]
        elif spec.kind == "dense":
            total += p["out_features"] * p["in_features"] + p["out_features"]
        elif spec.kind == "batchnorm":
            total += 2 * p["channels"]
        elif spec.kind == "lstm":
            h, f = p["hidden_size"], p["input_size"]
            total += 4 * h * (f + h + 1)
    return total


def test_desk_classifier_outputs_seven_probabilities():
    model = build_vgg_mini("desk", ClassificationHead(fc=(32, 16), classes=7))
    x = RngStream(0).uniform((3, 3, 32, 24))
    probs = predict_proba(model, x)
    assert probs.shape == (3, 7)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_full_scale_has_four_blocks_and_vgg16_convs():
    model = build_vgg_mini("paper", ClassificationHead())
    assert len(model.block_boundaries) == 4
    assert sum(l.kind == "conv2d" for l in model.layers) == 13
    assert model.input_shape == (100, 80, 3)
    assert model.layers[-1].params["out_features"] == 7


@pytest.mark.parametrize("kw", [{}, {"batchnorm": True}, {"residual": True, "convs": (2, 2, 2, 2)}])
def test_param_count_closed_form(kw):
    model = build_vgg_mini("desk", RegressionHead(fc=(32, 16)), **kw)
    assert count_params(model) == closed_form_params(model)


def test_shape_inference_matches_runtime():
    model = build_vgg_mini("desk", RegressionHead(fc=(32, 16)), batchnorm=True, residual=True, convs=(2, 1, 2, 1))
    x = RngStream(1).uniform((2, 3, 32, 24))
    predicted = infer_shapes(model, x.shape)
    out, tape = forward_pass(model, x, train_mode=True)
    assert predicted[-1] == out.shape == (2, 2)


def test_empty_model_is_identity():
    x = RngStream(2).uniform((2, 3))
    assert np.array_equal(forward_pass(ModelSpec(layers=[]), x)[0], x)


def test_forward_deterministic():
    model = build_vgg_mini("desk", RegressionHead(fc=(8,)), seed=3)
    x = RngStream(3).uniform((2, 3, 32, 24))
    assert model_forward(model, x).tobytes() == model_forward(model, x).tobytes()


def test_mismatch_names_layer():
    model = build_vgg_mini("desk", None)
    bad = ModelSpec(input_shape=(32, 24, 4), layers=model.layers, weights=model.weights)
    with pytest.raises(DimensionError, match="conv1_1"):
        infer_shapes(bad, (1, 4, 32, 24))


def test_skip_add_validation():
    with pytest.raises(ConfigError):
        ModelSpec(layers=[LayerSpec("skip_add", "add", {"target": "later"}), LayerSpec("relu", "later")])
    with pytest.raises(ConfigError):
        ModelSpec(layers=[LayerSpec("relu", "a"), LayerSpec("relu", "a")])


def test_cnn_lstm_shape_and_composition():
    trunk = build_vgg_mini("desk", None)
    model = build_cnn_lstm(trunk)
    x = RngStream(4).uniform((2, 16, 3, 32, 24))
    assert model_forward(model, x).shape == (2, 2)
    lstm = next(l for l in model.layers if l.kind == "lstm")
    assert lstm.params["hidden_size"] == 64
    assert sum(l.kind == "dense" for l in model.layers) == 3
    with pytest.raises(CompositionError):
        build_cnn_lstm(build_vgg_mini("desk", ClassificationHead(fc=(8,))))


def test_cnn_lstm_full_scale_defaults():
    trunk = build_vgg_mini("paper", None, convs=(1, 1, 1, 1))
    model = build_cnn_lstm(trunk, scale="paper")
    lstm = next(l for l in model.layers if l.kind == "lstm")
    assert lstm.params["hidden_size"] == 1024
    assert lstm.params["dropout"] == 0.2 and lstm.params["recurrent_dropout"] == 0.2
    assert model.input_shape == (100, 80, 3)


def test_cnn_lstm_trunk_constant_clip():
    trunk = build_vgg_mini("desk", None, seed=5)
    model = build_cnn_lstm(trunk, seed=5)
    frame = RngStream(5).uniform((1, 1, 3, 32, 24))
    clip = np.repeat(frame, 6, axis=1)
    n_trunk = len(trunk.layers)
    # trunk output is [1, T, C, h, w]
    feats = forward_pass(ModelSpec(trunk.input_shape, model.layers[:n_trunk], model.weights, arch="cnn_lstm"),
                         clip)[0]
    assert all(np.array_equal(feats[0, 0], feats[0, t]) for t in range(6))


def test_i3d_dilation_schedule_and_param_count():
    trunk = build_vgg_mini("desk", None)
    cfg = InflationConfig(dilation_schedule=(1, 2, 4, 8))
    model = build_i3d(trunk, cfg)
    dil = [l.params["temporal_dilation"] for l in model.layers if l.kind == "conv3d"]
    assert dil == [1, 2, 4, 8]
    conv2d_w = sum(trunk.weights[f"{l.name}.weight"].size for l in trunk.layers if l.kind == "conv2d")
    conv3d_w = sum(model.weights[f"{l.name}.weight"].size for l in model.layers if l.kind == "conv3d")
    assert conv3d_w == 3 * conv2d_w
    assert count_params(model) == closed_form_params(model)
    flat = build_i3d(trunk, InflationConfig())
    assert count_params(flat) == count_params(model)
    out = model_forward(model, RngStream(6).uniform((2, 3, 16, 32, 24)))
    assert out.shape == (2, 2)


def test_i3d_rejects_lstm():
    model = build_cnn_lstm(build_vgg_mini("desk", None))
    with pytest.raises(UnsupportedLayerError):
        inflate_model(model, InflationConfig())
    bad = build_vgg_mini("desk", None)
    bad.layers.append(LayerSpec("lstm", "lstm_x", {"input_size": 4, "hidden_size": 2}))
    with pytest.raises(UnsupportedLayerError, match="lstm_x"):
        inflate_model(bad, InflationConfig())


def test_strip_head_keeps_trunk_weights():
    model = build_vgg_mini("desk", ClassificationHead(fc=(8,)), seed=9)
    trunk = strip_head(model)
    assert all(l.kind not in ("dense", "flatten") for l in trunk.layers)
    assert np.array_equal(trunk.weights["conv1_1.weight"], model.weights["conv1_1.weight"])


def test_manifest_round_trip():
    model = build_cnn_lstm(build_vgg_mini("desk", None, batchnorm=True))
    again = parse_manifest(describe(model), model.weights)
    assert again.layers == model.layers
    assert again.block_boundaries == model.block_boundaries and again.arch == model.arch


def test_model_backward_finite_differences():
    r = RngStream(10)
    model = build_vgg_mini("desk", RegressionHead(fc=(4,)), residual=True, convs=(2, 1, 1, 1), seed=10)
    model.weights = {k: v.astype(np.float64) for k, v in model.weights.items()}
    x = r.uniform((1, 3, 32, 24))
    weights = r.uniform((1, 2), -1, 1)
    out, tape = forward_pass(model, x)
    gx, grads, _ = model_backward(model, tape, weights)

    def loss():
        return float(np.sum(forward_pass(model, x)[0] * weights))

    for name in ("conv1_2.bias", "fc_out.bias", "conv4_1.bias"):
        assert relative_error(grads[name], numeric_grad(loss, model.weights[name], 1e-4)) < 1e-4
