"""Slow, direct reference implementations used as test oracles.

Nothing here imports from the package; each function spells out its formula
with explicit loops.
"""

import math

import numpy as np


def contract_expand_loop(x, c):
    B, Din, C, T = x.shape
    D = c.shape[0]
    out = np.zeros((B, D, C, T))
    for b in range(B):
        for h in range(D):
            for ch in range(C):
                for t in range(T):
                    acc = 0.0
                    for d in range(Din):
                        acc += x[b, d, ch, t] * c[h, d, ch]
                    out[b, h, ch, t] = acc
    return out


def conv2d_loop(x, w, bias, padding="valid"):
    B, Din, H, W = x.shape
    Dout, _, Kh, Kw = w.shape
    if padding == "same":
        ph, pw = (Kh - 1) // 2, (Kw - 1) // 2
        xp = np.zeros((B, Din, H + Kh - 1, W + Kw - 1))
        xp[:, :, ph:ph + H, pw:pw + W] = x
    else:
        xp = x
    Ho, Wo = xp.shape[2] - Kh + 1, xp.shape[3] - Kw + 1
    out = np.zeros((B, Dout, Ho, Wo))
    for b in range(B):
        for o in range(Dout):
            for i in range(Ho):
                for j in range(Wo):
                    acc = bias[o]
                    for d in range(Din):
                        for ki in range(Kh):
                            for kj in range(Kw):
                                acc += xp[b, d, i + ki, j + kj] * w[o, d, ki, kj]
                    out[b, o, i, j] = acc
    return out


def conv2d_windowed(x, w, bias):
    """Valid conv2d summing each output window directly; fast enough for the SEED-VIG geometry."""
    B, Din, H, W = x.shape
    Dout, _, Kh, Kw = w.shape
    out = np.zeros((B, Dout, H - Kh + 1, W - Kw + 1))
    for i in range(H - Kh + 1):
        for j in range(W - Kw + 1):
            patch = x[:, :, i:i + Kh, j:j + Kw]
            for o in range(Dout):
                out[:, o, i, j] = (patch * w[o]).sum(axis=(1, 2, 3)) + bias[o]
    return out


def softmax_loop(v):
    e = [math.exp(a) for a in v]
    s = sum(e)
    return [a / s for a in e]


def softmax_axis_loop(x, axis):
    moved = np.moveaxis(x, axis, -1)
    out = np.empty_like(moved)
    for idx in np.ndindex(moved.shape[:-1]):
        out[idx] = softmax_loop(list(moved[idx]))
    return np.moveaxis(out, -1, axis)


def avg_pool_loop(x, wh, ww):
    B, D, H, W = x.shape
    Ho, Wo = H // wh, W // ww
    out = np.zeros((B, D, Ho, Wo))
    for b in range(B):
        for d in range(D):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0
                    for a in range(wh):
                        for c in range(ww):
                            acc += x[b, d, i * wh + a, j * ww + c]
                    out[b, d, i, j] = acc / (wh * ww)
    return out


def erf_series(x, terms=80):
    """Maclaurin series of erf; accurate to ~1e-15 for |x| < 3."""
    total = 0.0
    for n in range(terms):
        total += (-1) ** n * x ** (2 * n + 1) / (math.factorial(n) * (2 * n + 1))
    return 2.0 / math.sqrt(math.pi) * total


def gelu_series(x):
    return x * 0.5 * (1.0 + erf_series(x / math.sqrt(2.0)))


def k_pooling_direct(f, n_t):
    N = max(1, math.floor(n_t / 200))
    return max(1, math.floor(f / 10 / N))


def nonlinear_attention_script(x, W1, b1, W2):
    """Per (b, d, ch): score = W2 . tanh(W1 @ x[b,d,ch,:] + b1); softmax over ch; scale."""
    B, D, C, T = x.shape
    out = np.zeros_like(x)
    alpha = np.zeros((B, D, C))
    for b in range(B):
        for d in range(D):
            scores = []
            for ch in range(C):
                hidden = [math.tanh(sum(W1[h, t] * x[b, d, ch, t] for t in range(T)) + b1[h])
                          for h in range(W1.shape[0])]
                scores.append(sum(W2[0, h] * hidden[h] for h in range(len(hidden))))
            a = softmax_loop(scores)
            for ch in range(C):
                alpha[b, d, ch] = a[ch]
                out[b, d, ch, :] = a[ch] * x[b, d, ch, :]
    return out, alpha


def depth_attention_script(F, kernel, bias):
    """Channel mean, zero-padded 1-D conv over depth per time step, softmax * depth, rescale F."""
    B, Do, Co, To = F.shape
    K = len(kernel)
    lo = (K - 1) // 2
    out = np.zeros_like(F)
    for b in range(B):
        for t in range(To):
            pooled = [sum(F[b, d, c, t] for c in range(Co)) / Co for d in range(Do)]
            mixed = []
            for d in range(Do):
                acc = bias
                for k in range(K):
                    src = d + k - lo
                    if 0 <= src < Do:
                        acc += kernel[k] * pooled[src]
                mixed.append(acc)
            weights = softmax_loop(mixed)
            for d in range(Do):
                out[b, d, :, t] = weights[d] * Do * F[b, d, :, t]
    return out


def dtft_magnitude(h, freq, fs):
    n = np.arange(len(h))
    return abs(sum(h[k] * complex(math.cos(-2 * math.pi * freq / fs * k),
                                  math.sin(-2 * math.pi * freq / fs * k)) for k in n))


def sine_amplitude(signal, freq, fs):
    """Least-squares amplitude of a sinusoid at ``freq``."""
    t = np.arange(signal.size) / fs
    A = np.column_stack([np.sin(2 * np.pi * freq * t), np.cos(2 * np.pi * freq * t)])
    coef, *_ = np.linalg.lstsq(A, signal, rcond=None)
    return float(np.hypot(*coef))
