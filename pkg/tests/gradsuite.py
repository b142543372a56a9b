"""Seeded small instances of every layer kind for finite-difference checks."""
import numpy as np

from inflatenn.gradcheck import check_layer
from inflatenn.layers import (BatchNormLayer, Conv2DLayer, Conv3DLayer, DenseLayer, DropoutLayer,
                              FlattenLayer, GlobalAvgPoolLayer, LSTMLayer, MaxPoolLayer, ReLULayer)
from inflatenn.tensor import RngStream

TOLERANCE = 1e-4


def _u(rng, shape, scale=1.0):
    return rng.uniform(shape, -scale, scale)


def _away_from_zero(x, gap=0.05):
    # keep ReLU and max-pool inputs off their kinks so central differences are exact
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap, x)


def _distinct(rng, shape):
    # well-separated values so no max-pool window has a near tie
    n = int(np.prod(shape))
    return (rng.permutation(n).reshape(shape) * 0.1 + rng.uniform(shape, 0, 0.01))


def cases():
    """(name, layer, input, train, rng_factory) tuples."""
    r = RngStream(1234)
    out = []
    s = r.split(0)
    out.append(("conv2d", Conv2DLayer(_u(s, (3, 2, 3, 3)), _u(s, 3)), _u(s, (2, 2, 5, 4)), False, None))
    s = r.split(1)
    out.append(("conv2d_stride2_nopad", Conv2DLayer(_u(s, (2, 2, 3, 3)), _u(s, 2), stride=2, padding=0),
                _u(s, (1, 2, 7, 6)), False, None))
    s = r.split(2)
    out.append(("conv3d", Conv3DLayer(_u(s, (2, 2, 3, 3, 3)), _u(s, 2)), _u(s, (1, 2, 4, 4, 3)), False, None))
    s = r.split(3)
    out.append(("conv3d_dilated", Conv3DLayer(_u(s, (2, 1, 3, 3, 3)), _u(s, 2), temporal_dilation=2),
                _u(s, (1, 1, 6, 3, 3)), False, None))
    s = r.split(4)
    out.append(("dense", DenseLayer(_u(s, (4, 5)), _u(s, 4)), _u(s, (3, 5)), False, None))
    s = r.split(5)
    c = 3
    out.append(("batchnorm_train", BatchNormLayer(1 + _u(s, c, 0.5), _u(s, c), np.zeros(c), np.ones(c)),
                _u(s, (4, c, 3, 2)), True, None))
    s = r.split(6)
    out.append(("batchnorm_train_3d", BatchNormLayer(1 + _u(s, c, 0.5), _u(s, c), np.zeros(c), np.ones(c),
                                                     channel_axis=-4),
                _u(s, (2, c, 2, 2, 2)), True, None))
    s = r.split(7)
    out.append(("batchnorm_eval", BatchNormLayer(1 + _u(s, c, 0.5), _u(s, c), _u(s, c, 0.2),
                                                 1 + _u(s, c, 0.5)),
                _u(s, (2, c, 2, 2)), False, None))
    s = r.split(8)
    out.append(("maxpool", MaxPoolLayer((2, 2)), _distinct(s, (2, 2, 5, 4)), False, None))
    s = r.split(9)
    out.append(("maxpool_clip", MaxPoolLayer((2, 2)), _distinct(s, (1, 2, 3, 4, 4)), False, None))
    s = r.split(10)
    out.append(("globalavgpool", GlobalAvgPoolLayer(-3), _u(s, (2, 3, 3, 2)), False, None))
    s = r.split(11)
    out.append(("globalavgpool_clip", GlobalAvgPoolLayer(-4), _u(s, (2, 3, 2, 2, 2)), False, None))
    s = r.split(12)
    out.append(("relu", ReLULayer(), _away_from_zero(_u(s, (3, 7))), False, None))
    s = r.split(13)
    out.append(("dropout", DropoutLayer(0.3), _u(s, (4, 6)), True, lambda: RngStream(77)))
    s = r.split(14)
    out.append(("flatten", FlattenLayer(2), _u(s, (2, 3, 2, 2)), False, None))
    s = r.split(15)
    f, h = 4, 5
    out.append(("lstm", LSTMLayer(_u(s, (4 * h, f), 0.3), _u(s, (4 * h, h), 0.3), _u(s, 4 * h, 0.3)),
                _u(s, (2, 3, f)), False, None))
    s = r.split(16)
    out.append(("lstm_unbatched_sequences",
                LSTMLayer(_u(s, (4 * h, f), 0.3), _u(s, (4 * h, h), 0.3), _u(s, 4 * h, 0.3),
                          return_sequences=True),
                _u(s, (3, f)), False, None))
    s = r.split(17)
    out.append(("lstm_dropout",
                LSTMLayer(_u(s, (4 * h, f), 0.3), _u(s, (4 * h, h), 0.3), _u(s, 4 * h, 0.3), 0.2, 0.2),
                _u(s, (2, 3, f)), True, lambda: RngStream(5)))
    return out


def run_suite():
    """{case name: max relative error over the input and every parameter}."""
    results = {}
    for name, layer, x, train, factory in cases():
        errs = check_layer(layer, x, train=train, seed=0, h=1e-3, rng_factory=factory)
        results[name] = max(errs.values())
    return results
