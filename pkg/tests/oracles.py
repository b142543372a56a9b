"""Independent brute-force references used by the tests.

Nothing here imports the package's numerical code; every function is a
direct loop over the defining formula.
"""
import math

import numpy as np


def matmul_loops(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += float(a[i, t]) * float(b[t, j])
            out[i, j] = s
    return out


def moments_two_pass(x):
    n = len(x)
    mean = sum(float(v) for v in x) / n
    return mean, sum((float(v) - mean) ** 2 for v in x) / n


def conv2d_loops(x, w, b, stride=1, padding=0):
    """Cross-correlation with six nested loops; x [N, C, H, W], w [O, C, kh, kw]."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    s = float(b[oc])
                    for ic in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                s += xp[bi, ic, i * stride + di, j * stride + dj] * w[oc, ic, di, dj]
                    out[bi, oc, i, j] = s
    return out


def conv3d_frames(x, w, b, padding=1, temporal_padding=None):
    """Undilated 3D cross-correlation built from per-tap 2D loop convolutions.

    x [N, C, T, H, W], w [O, C, kt, kh, kw]; temporal padding defaults to 'same'.
    """
    n, c, t, h, wd = x.shape
    o, _, kt, _, _ = w.shape
    pt = (kt - 1) // 2 if temporal_padding is None else temporal_padding
    xp = np.zeros((n, c, t + 2 * pt, h, wd))
    xp[:, :, pt:pt + t] = x
    to = t + 2 * pt - kt + 1
    out = None
    for f in range(to):
        acc = None
        for k in range(kt):
            y = conv2d_loops(xp[:, :, f + k], w[:, :, k], np.zeros(o), padding=padding)
            acc = y if acc is None else acc + y
        acc = acc + np.asarray(b)[None, :, None, None]
        if out is None:
            out = np.zeros((n, o, to) + acc.shape[2:])
        out[:, :, f] = acc
    return out


def zero_stuff(w, d):
    """Temporal kernel [.., kt, ..] -> [.., (kt-1)*d+1, ..] with d-1 zeros between taps."""
    o, c, kt, kh, kw = w.shape
    out = np.zeros((o, c, (kt - 1) * d + 1, kh, kw))
    out[:, :, ::d] = w
    return out


def sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def lstm_unrolled(x, w_x, w_h, bias):
    """Step-by-step scalar LSTM; gate order i, f, g, o. Returns all hidden states [T, H]."""
    t_steps, f = x.shape
    hsz = w_h.shape[1]
    h = [0.0] * hsz
    c = [0.0] * hsz
    out = np.zeros((t_steps, hsz))
    for t in range(t_steps):
        z = []
        for r in range(4 * hsz):
            s = float(bias[r])
            for k in range(f):
                s += float(w_x[r, k]) * float(x[t, k])
            for k in range(hsz):
                s += float(w_h[r, k]) * h[k]
            z.append(s)
        new_h, new_c = [], []
        for u in range(hsz):
            i = sigmoid(z[u])
            fg = sigmoid(z[hsz + u])
            g = math.tanh(z[2 * hsz + u])
            og = sigmoid(z[3 * hsz + u])
            cu = fg * c[u] + i * g
            new_c.append(cu)
            new_h.append(og * math.tanh(cu))
        h, c = new_h, new_c
        out[t] = h
    return out


def enumerate_windows(frame_index, valid, seq_len, stride, tolerance):
    """Every window of the valid-frame subsequence, checked one by one."""
    kept = [p for p, ok in enumerate(valid) if ok]
    out = []
    start = 0
    while start + seq_len <= len(kept):
        window = kept[start:start + seq_len]
        ok = all(frame_index[window[k + 1]] - frame_index[window[k]] <= tolerance
                 for k in range(seq_len - 1))
        if ok:
            out.append(window)
        start += stride
    return out


def mae_direct(y, p):
    return sum(abs(a - b) for a, b in zip(y, p)) / len(y)


def mape_direct(y, p, eps=1e-3):
    terms = [abs(b - a) / abs(a) for a, b in zip(y, p) if abs(a) >= eps]
    return 100.0 * sum(terms) / len(terms)


def pcc_direct(y, p):
    n = len(y)
    my = sum(y) / n
    mp = sum(p) / n
    cov = sum((a - my) * (b - mp) for a, b in zip(y, p))
    sy = math.sqrt(sum((a - my) ** 2 for a in y))
    sp = math.sqrt(sum((b - mp) ** 2 for b in p))
    return cov / (sy * sp)


def ccc_direct(y, p):
    """rho * 2 s_y s_p / (s_y^2 + s_p^2 + (mean_y - mean_p)^2), population moments."""
    n = len(y)
    my = sum(y) / n
    mp = sum(p) / n
    vy = sum((a - my) ** 2 for a in y) / n
    vp = sum((b - mp) ** 2 for b in p) / n
    rho = pcc_direct(y, p)
    return rho * 2 * math.sqrt(vy) * math.sqrt(vp) / (vy + vp + (my - mp) ** 2)
