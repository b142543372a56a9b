"""Forward and backward passes for the layer kinds the two architectures use.

Every layer exposes ``forward(x, train=False, rng=None) -> (y, cache)`` and
``backward(cache, grad_out) -> (grad_input, grad_params)``.  Arithmetic runs
in the dtype of the inputs, so gradient checks can run the very same code on
float64 shadows of the float32 parameters.

Layouts: images are ``[..., C, H, W]`` (any number of leading axes is folded
into the batch, which is how the cascade applies its trunk frame by frame),
clips for 3D layers are ``[N, C, T, H, W]``.  Convolution is
cross-correlation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, StateError
from .tensor import RngStream, as_rng


def _cache(layer, **kw):
    kw["_kind"] = type(layer).__name__
    kw["_owner"] = id(layer)
    return kw


def _check_cache(layer, cache):
    if not isinstance(cache, dict) or "_kind" not in cache:
        raise StateError(f"{type(layer).__name__}.backward called without a forward cache")
    if cache["_kind"] != type(layer).__name__:
        raise StateError(
            f"cache from {cache['_kind']} passed to {type(layer).__name__}.backward")


def _cast(w, like):
    return w if w.dtype == like.dtype else w.astype(like.dtype)


# --------------------------------------------------------------------------
# convolution


@dataclass
class Conv2DLayer:
    weight: np.ndarray  # [out, in, kh, kw]
    bias: np.ndarray  # [out]
    stride: int = 1
    padding: int = 1

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def out_shape(self, in_shape):
        *lead, c, h, w = in_shape
        o, ci, kh, kw = self.weight.shape
        if c != ci:
            raise DimensionError(f"conv2d expects {ci} input channels, got {c} (input {tuple(in_shape)})")
        ho = (h + 2 * self.padding - kh) // self.stride + 1
        wo = (w + 2 * self.padding - kw) // self.stride + 1
        if ho < 1 or wo < 1:
            raise DimensionError(
                f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * self.padding}x{w + 2 * self.padding}")
        return (*lead, o, ho, wo)

    def forward(self, x, train=False, rng=None):
        out_shape = self.out_shape(x.shape)
        xb = x.reshape((-1,) + x.shape[-3:])
        w = _cast(self.weight, x)
        b = _cast(self.bias, x)
        p, s = self.padding, self.stride
        o, c, kh, kw = w.shape
        ho, wo = out_shape[-2:]
        bsz = xb.shape[0]
        # im2col as [C, kh, kw, B, Ho, Wo]; rows line up with weight.reshape(O, -1)
        xp = np.pad(xb, ((0, 0), (0, 0), (p, p), (p, p))).transpose(1, 0, 2, 3)
        cols = np.empty((c, kh, kw, bsz, ho, wo), dtype=xp.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, i, j] = xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
        cols = cols.reshape(c * kh * kw, -1)
        y = (w.reshape(o, -1) @ cols).reshape(o, bsz, ho, wo).transpose(1, 0, 2, 3)
        y = np.ascontiguousarray(y) + b[None, :, None, None]
        return y.reshape(out_shape), _cache(self, cols=cols, xp_shape=xp.shape, in_shape=x.shape)

    def backward(self, cache, gy):
        _check_cache(self, cache)
        cols = cache["cols"]
        w = _cast(self.weight, gy)
        o, c, kh, kw = w.shape
        gyb = gy.reshape((-1,) + gy.shape[-3:])  # [B, O, Ho, Wo]
        bsz, _, ho, wo = gyb.shape
        g = np.ascontiguousarray(gyb.transpose(1, 0, 2, 3)).reshape(o, -1)
        gw = (g @ cols.T).reshape(w.shape)
        gb = g.sum(axis=1)
        gcol = (w.reshape(o, -1).T @ g).reshape(c, kh, kw, bsz, ho, wo)
        gxp = np.zeros(cache["xp_shape"], dtype=gy.dtype)  # [C, B, Hp, Wp]
        s, p = self.stride, self.padding
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += gcol[:, i, j]
        hp, wp = gxp.shape[2:]
        gx = gxp[:, :, p:hp - p, p:wp - p].transpose(1, 0, 2, 3)
        return np.ascontiguousarray(gx).reshape(cache["in_shape"]), {"weight": gw, "bias": gb}


@dataclass
class Conv3DLayer:
    weight: np.ndarray  # [out, in, kt, kh, kw]
    bias: np.ndarray
    stride: int = 1  # spatial only
    padding: int = 1  # spatial
    temporal_dilation: int = 1
    temporal_padding: int | None = None  # None -> keep temporal extent

    def _tpad(self):
        if self.temporal_padding is not None:
            return self.temporal_padding
        return self.temporal_dilation * (self.weight.shape[2] - 1) // 2

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def out_shape(self, in_shape):
        if len(in_shape) != 5:
            raise DimensionError(f"conv3d expects [N, C, T, H, W], got {tuple(in_shape)}")
        n, c, t, h, w = in_shape
        o, ci, kt, kh, kw = self.weight.shape
        if c != ci:
            raise DimensionError(f"conv3d expects {ci} input channels, got {c} (input {tuple(in_shape)})")
        d, pt = self.temporal_dilation, self._tpad()
        need = 1 + (kt - 1) * d
        if t + 2 * pt < need:
            raise DimensionError(
                f"conv3d needs a temporal extent of at least {need} after padding "
                f"(kt={kt}, dilation={d}), got {t + 2 * pt}")
        to = t + 2 * pt - need + 1
        ho = (h + 2 * self.padding - kh) // self.stride + 1
        wo = (w + 2 * self.padding - kw) // self.stride + 1
        if ho < 1 or wo < 1:
            raise DimensionError("conv3d spatial kernel larger than padded input")
        return (n, o, to, ho, wo)

    def forward(self, x, train=False, rng=None):
        n, o, to, ho, wo = self.out_shape(x.shape)
        w = _cast(self.weight, x)
        b = _cast(self.bias, x)
        p, s, d, pt = self.padding, self.stride, self.temporal_dilation, self._tpad()
        _, c, kt, kh, kw = w.shape
        # im2col as [C, kt, kh, kw, N, To, Ho, Wo]
        xp = np.pad(x, ((0, 0), (0, 0), (pt, pt), (p, p), (p, p))).transpose(1, 0, 2, 3, 4)
        cols = np.empty((c, kt, kh, kw, n, to, ho, wo), dtype=xp.dtype)
        for k in range(kt):
            for i in range(kh):
                for j in range(kw):
                    cols[:, k, i, j] = xp[:, :, k * d:k * d + to, i:i + s * ho:s, j:j + s * wo:s]
        cols = cols.reshape(c * kt * kh * kw, -1)
        y = (w.reshape(o, -1) @ cols).reshape(o, n, to, ho, wo).transpose(1, 0, 2, 3, 4)
        y = np.ascontiguousarray(y) + b[None, :, None, None, None]
        return y, _cache(self, cols=cols, xp_shape=xp.shape)

    def backward(self, cache, gy):
        _check_cache(self, cache)
        cols = cache["cols"]
        w = _cast(self.weight, gy)
        p, s, d, pt = self.padding, self.stride, self.temporal_dilation, self._tpad()
        o, c, kt, kh, kw = w.shape
        n, _, to, ho, wo = gy.shape
        g = np.ascontiguousarray(gy.transpose(1, 0, 2, 3, 4)).reshape(o, -1)
        gw = (g @ cols.T).reshape(w.shape)
        gb = g.sum(axis=1)
        gcol = (w.reshape(o, -1).T @ g).reshape(c, kt, kh, kw, n, to, ho, wo)
        gxp = np.zeros(cache["xp_shape"], dtype=gy.dtype)  # [C, N, Tp, Hp, Wp]
        for k in range(kt):
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, k * d:k * d + to, i:i + s * ho:s, j:j + s * wo:s] += gcol[:, k, i, j]
        tp, hp, wp = gxp.shape[2:]
        gx = gxp[:, :, pt:tp - pt, p:hp - p, p:wp - p].transpose(1, 0, 2, 3, 4)
        return np.ascontiguousarray(gx), {"weight": gw, "bias": gb}


def conv2d_forward(layer: Conv2DLayer, x):
    return layer.forward(x)[0]


def conv3d_forward(layer: Conv3DLayer, x):
    return layer.forward(x)[0]


# --------------------------------------------------------------------------
# dense / activations / dropout


@dataclass
class DenseLayer:
    weight: np.ndarray  # [out, in]
    bias: np.ndarray

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def out_shape(self, in_shape):
        if in_shape[-1] != self.weight.shape[1]:
            raise DimensionError(
                f"dense expects {self.weight.shape[1]} input features, got {in_shape[-1]}")
        return (*in_shape[:-1], self.weight.shape[0])

    def forward(self, x, train=False, rng=None):
        self.out_shape(x.shape)
        y = x @ _cast(self.weight, x).T + _cast(self.bias, x)
        return y, _cache(self, x=x)

    def backward(self, cache, gy):
        _check_cache(self, cache)
        x = cache["x"]
        x2 = x.reshape(-1, x.shape[-1])
        g2 = gy.reshape(-1, gy.shape[-1])
        gw = g2.T @ x2
        gb = g2.sum(axis=0)
        gx = gy @ _cast(self.weight, gy)
        return gx, {"weight": gw, "bias": gb}


def dense_forward(weight, bias, x):
    return DenseLayer(np.asarray(weight), np.asarray(bias)).forward(np.asarray(x))[0]


@dataclass
class ReLULayer:
    def params(self):
        return {}

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x, train=False, rng=None):
        mask = x > 0
        return x * mask, _cache(self, mask=mask)

    def backward(self, cache, gy):
        _check_cache(self, cache)
        return gy * cache["mask"], {}


@dataclass
class DropoutLayer:
    """Inverted dropout; the identity in eval mode."""

    rate: float = 0.5

    def params(self):
        return {}

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0.0:
            return x, _cache(self, mask=None)
        keep = 1.0 - self.rate
        mask = as_rng(rng).bernoulli(x.shape, keep).astype(x.dtype) / keep
        return x * mask, _cache(self, mask=mask)

    def backward(self, cache, gy):
        _check_cache(self, cache)
        mask = cache["mask"]
        return (gy if mask is None else gy * mask), {}


# --------------------------------------------------------------------------
# pooling / reshaping


@dataclass
class MaxPoolLayer:
    """Max pooling over the two trailing (spatial) axes.

    Non-overlapping windows; trailing rows/columns that do not fill a whole
    window are dropped.  On clips this is the 1x2x2 pool, so the temporal
    extent is untouched.
    """

    window: tuple[int, int] = (2, 2)

    def params(self):
        return {}

    def out_shape(self, in_shape):
        ph, pw = self.window
        h, w = in_shape[-2:]
        if ph > h or pw > w:
            raise DimensionError(f"pool window {self.window} larger than input {h}x{w}")
        return (*in_shape[:-2], h // ph, w // pw)

    def forward(self, x, train=False, rng=None):
        shape = self.out_shape(x.shape)
        ph, pw = self.window
        ho, wo = shape[-2:]
        lead = x.shape[:-2]
        xc = x[..., :ho * ph, :wo * pw]
        blocks = xc.reshape(lead + (ho, ph, wo, pw))
        blocks = np.moveaxis(blocks, -3, -2).reshape(lead + (ho, wo, ph * pw))
        arg = blocks.argmax(axis=-1)
        y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        return y, _cache(self, arg=arg, in_shape=x.shape)

    def backward(self, cache, gy):
        _check_cache(self, cache)
        ph, pw = self.window
        arg = cache["arg"]
        in_shape = cache["in_shape"]
        lead = in_shape[:-2]
        ho, wo = gy.shape[-2:]
        onehot = (arg[..., None] == np.arange(ph * pw)).astype(gy.dtype) * gy[..., None]
        blocks = onehot.reshape(lead + (ho, wo, ph, pw))
        blocks = np.moveaxis(blocks, -2, -3).reshape(lead + (ho * ph, wo * pw))
        gx = np.zeros(in_shape, dtype=gy.dtype)
        gx[..., :ho * ph, :wo * pw] = blocks
        return gx, {}


@dataclass
class GlobalAvgPoolLayer:
    """Averages every axis after ``channel_axis`` (a negative index)."""

    channel_axis: int = -3

    def params(self):
        return {}

    def _axes(self, ndim):
        ca = self.channel_axis % ndim
        return tuple(range(ca + 1, ndim))

    def out_shape(self, in_shape):
        axes = self._axes(len(in_shape))
        return tuple(n for i, n in enumerate(in_shape) if i not in axes)

    def forward(self, x, train=False, rng=None):
        axes = self._axes(x.ndim)
        return x.mean(axis=axes), _cache(self, in_shape=x.shape, axes=axes)

    def backward(self, cache, gy):
        _check_cache(self, cache)
        in_shape, axes = cache["in_shape"], cache["axes"]
        count = int(np.prod([in_shape[a] for a in axes]))
        g = gy.reshape(gy.shape + (1,) * len(axes)) / count
        return np.broadcast_to(g, in_shape).copy(), {}


@dataclass
class FlattenLayer:
    keep: int = 1  # leading axes preserved: 1 for [N, ...], 2 for [N, T, ...]

    def params(self):
        return {}

    def out_shape(self, in_shape):
        return tuple(in_shape[:self.keep]) + (int(np.prod(in_shape[self.keep:])),)

    def forward(self, x, train=False, rng=None):
        return x.reshape(self.out_shape(x.shape)), _cache(self, in_shape=x.shape)

    def backward(self, cache, gy):
        _check_cache(self, cache)
        return gy.reshape(cache["in_shape"]), {}


# --------------------------------------------------------------------------
# batch normalization


@dataclass
class BatchNormLayer:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    channel_axis: int = -3

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def out_shape(self, in_shape):
        c = in_shape[self.channel_axis]
        if c != self.gamma.shape[0]:
            raise DimensionError(f"batchnorm expects {self.gamma.shape[0]} channels, got {c}")
        return tuple(in_shape)

    def _bshape(self, ndim):
        shape = [1] * ndim
        shape[self.channel_axis] = -1
        return shape

    def forward(self, x, train=False, rng=None):
        self.out_shape(x.shape)
        bs = self._bshape(x.ndim)
        ca = self.channel_axis % x.ndim
        axes = tuple(i for i in range(x.ndim) if i != ca)
        gamma = _cast(self.gamma, x).reshape(bs)
        beta = _cast(self.beta, x).reshape(bs)
        if train:
            mean = x.mean(axis=axes)
            var = ((x - mean.reshape(bs)) ** 2).mean(axis=axes)
            m = self.momentum
            updates = {
                "running_mean": ((1 - m) * self.running_mean + m * mean).astype(self.running_mean.dtype),
                "running_var": ((1 - m) * self.running_var + m * var).astype(self.running_var.dtype),
            }
        else:
            mean = _cast(self.running_mean, x)
            var = _cast(self.running_var, x)
            updates = {}
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(bs)) * inv_std.reshape(bs)
        y = xhat * gamma + beta
        return y, _cache(self, xhat=xhat, inv_std=inv_std, axes=axes, train=train, updates=updates)

    def backward(self, cache, gy):
        _check_cache(self, cache)
        xhat, inv_std, axes = cache["xhat"], cache["inv_std"], cache["axes"]
        bs = self._bshape(gy.ndim)
        ggamma = (gy * xhat).sum(axis=axes)
        gbeta = gy.sum(axis=axes)
        dxhat = gy * _cast(self.gamma, gy).reshape(bs)
        if cache["train"]:
            count = gy.size // gy.shape[self.channel_axis]
            s1 = dxhat.sum(axis=axes).reshape(bs)
            s2 = (dxhat * xhat).sum(axis=axes).reshape(bs)
            gx = inv_std.reshape(bs) / count * (count * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * inv_std.reshape(bs)
        return gx, {"gamma": ggamma, "beta": gbeta}


# --------------------------------------------------------------------------
# LSTM


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class LSTMLayer:
    """Single LSTM layer, gate order (input, forget, candidate, output).

    ``w_x`` is ``[4H, F]``, ``w_h`` is ``[4H, H]``, ``bias`` is ``[4H]``.
    Input and recurrent dropout masks are drawn once per sequence.
    """

    w_x: np.ndarray
    w_h: np.ndarray
    bias: np.ndarray
    dropout_rate: float = 0.0
    recurrent_dropout_rate: float = 0.0
    return_sequences: bool = False

    def __post_init__(self):
        h4 = self.w_x.shape[0]
        if h4 % 4 or self.w_h.shape != (h4, h4 // 4) or self.bias.shape != (h4,):
            raise DimensionError(
                f"inconsistent LSTM parameter shapes: w_x {self.w_x.shape}, "
                f"w_h {self.w_h.shape}, bias {self.bias.shape}")
        for r in (self.dropout_rate, self.recurrent_dropout_rate):
            if not 0.0 <= r < 1.0:
                raise DimensionError(f"LSTM dropout rate must lie in [0, 1), got {r}")

    @property
    def hidden_size(self):
        return self.w_h.shape[1]

    def params(self):
        return {"w_x": self.w_x, "w_h": self.w_h, "bias": self.bias}

    def out_shape(self, in_shape):
        if len(in_shape) not in (2, 3):
            raise DimensionError(f"lstm expects [steps, features] or [N, steps, features], got {tuple(in_shape)}")
        if in_shape[-1] != self.w_x.shape[1]:
            raise DimensionError(f"lstm expects {self.w_x.shape[1]} features, got {in_shape[-1]}")
        if self.return_sequences:
            return (*in_shape[:-1], self.hidden_size)
        return (*in_shape[:-2], self.hidden_size)

    def forward(self, x, train=False, rng=None):
        out_shape = self.out_shape(x.shape)
        unbatched = x.ndim == 2
        xs = x[None] if unbatched else x
        n, steps, feat = xs.shape
        hs = self.hidden_size
        w_x, w_h, b = (_cast(a, xs) for a in (self.w_x, self.w_h, self.bias))
        mx = mh = None
        if train and self.dropout_rate > 0:
            keep = 1.0 - self.dropout_rate
            mx = as_rng(rng).bernoulli((n, feat), keep).astype(xs.dtype) / keep
        if train and self.recurrent_dropout_rate > 0:
            keep = 1.0 - self.recurrent_dropout_rate
            mh = as_rng(rng).bernoulli((n, hs), keep).astype(xs.dtype) / keep
        xin = xs * mx[:, None, :] if mx is not None else xs
        zx = xin @ w_x.T + b  # [N, steps, 4H]
        h = np.zeros((n, hs), dtype=zx.dtype)
        c = np.zeros((n, hs), dtype=zx.dtype)
        hseq = np.empty((n, steps, hs), dtype=zx.dtype)
        cseq = np.empty((n, steps + 1, hs), dtype=zx.dtype)
        gates = np.empty((n, steps, 4 * hs), dtype=zx.dtype)
        hprev_in = np.empty((n, steps, hs), dtype=zx.dtype)
        cseq[:, 0] = c
        for t in range(steps):
            hin = h * mh if mh is not None else h
            hprev_in[:, t] = hin
            z = zx[:, t] + hin @ w_h.T
            i = _sigmoid(z[:, :hs])
            f = _sigmoid(z[:, hs:2 * hs])
            g = np.tanh(z[:, 2 * hs:3 * hs])
            o = _sigmoid(z[:, 3 * hs:])
            c = f * c + i * g
            h = o * np.tanh(c)
            gates[:, t] = np.concatenate([i, f, g, o], axis=1)
            cseq[:, t + 1] = c
            hseq[:, t] = h
        y = hseq if self.return_sequences else hseq[:, -1]
        if unbatched:
            y = y[0]
        cache = _cache(self, xin=xin, mx=mx, mh=mh, gates=gates, cseq=cseq,
                       hprev_in=hprev_in, unbatched=unbatched)
        return y.reshape(out_shape), cache

    def backward(self, cache, gy):
        _check_cache(self, cache)
        xin, mx, mh = cache["xin"], cache["mx"], cache["mh"]
        gates, cseq, hprev_in = cache["gates"], cache["cseq"], cache["hprev_in"]
        n, steps, _ = xin.shape
        hs = self.hidden_size
        w_x, w_h = _cast(self.w_x, gy), _cast(self.w_h, gy)
        if cache["unbatched"]:
            gy = gy[None]
        if self.return_sequences:
            gh_seq = gy
        else:
            gh_seq = np.zeros((n, steps, hs), dtype=gy.dtype)
            gh_seq[:, -1] = gy
        dz_all = np.empty((n, steps, 4 * hs), dtype=gy.dtype)
        dh_next = np.zeros((n, hs), dtype=gy.dtype)
        dc_next = np.zeros((n, hs), dtype=gy.dtype)
        for t in reversed(range(steps)):
            gt = gates[:, t]
            i, f, g, o = gt[:, :hs], gt[:, hs:2 * hs], gt[:, 2 * hs:3 * hs], gt[:, 3 * hs:]
            tc = np.tanh(cseq[:, t + 1])
            dh = gh_seq[:, t] + dh_next
            do = dh * tc
            dc = dh * o * (1.0 - tc * tc) + dc_next
            di = dc * g
            dg = dc * i
            df = dc * cseq[:, t]
            dc_next = dc * f
            dz = np.concatenate(
                [di * i * (1 - i), df * f * (1 - f), dg * (1 - g * g), do * o * (1 - o)], axis=1)
            dz_all[:, t] = dz
            dh_in = dz @ w_h
            dh_next = dh_in * mh if mh is not None else dh_in
        dz2 = dz_all.reshape(-1, 4 * hs)
        gw_x = dz2.T @ xin.reshape(-1, xin.shape[-1])
        gw_h = dz2.T @ hprev_in.reshape(-1, hs)
        gb = dz2.sum(axis=0)
        gx = dz_all @ w_x
        if mx is not None:
            gx = gx * mx[:, None, :]
        if cache["unbatched"]:
            gx = gx[0]
        return gx, {"w_x": gw_x, "w_h": gw_h, "bias": gb}


def lstm_forward(layer: LSTMLayer, seq, train_mode=False, rng: RngStream | None = None):
    """Full hidden-state sequence ``[steps, hidden]`` (or ``[N, steps, hidden]``)."""
    seq_layer = LSTMLayer(layer.w_x, layer.w_h, layer.bias, layer.dropout_rate,
                          layer.recurrent_dropout_rate, return_sequences=True)
    return seq_layer.forward(seq, train=train_mode, rng=rng)[0]


def pool_forward(kind: str, x, window=(2, 2), channel_axis=-3):
    if kind == "max":
        return MaxPoolLayer(tuple(window)).forward(x)[0]
    if kind == "global_avg":
        return GlobalAvgPoolLayer(channel_axis).forward(x)[0]
    raise DimensionError(f"unknown pool kind {kind!r}")


def layer_backward(layer, cached_forward_state, grad_out):
    """Gradients of ``layer`` given the cache from its matching forward call."""
    if cached_forward_state is None:
        raise StateError(f"no cached forward state for {type(layer).__name__}")
    return layer.backward(cached_forward_state, grad_out)
