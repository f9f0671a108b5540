"""Deliberately naive reference implementations used as independent test oracles.

Nothing here shares code with the package: plain Python loops over numpy scalars.
"""

import math

import numpy as np


def conv2d_loops(x, w, b=None, stride=1, padding=0):
    n, c, h, wd = x.shape
    co, ci, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for a in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else float(b[o])
                    for ch in range(c):
                        for di in range(k):
                            for dj in range(k):
                                r = i * stride + di - padding
                                q = j * stride + dj - padding
                                if 0 <= r < h and 0 <= q < wd:
                                    acc += x[a, ch, r, q] * w[o, ch, di, dj]
                    out[a, o, i, j] = acc
    return out


def maxpool_loops(x, k=2):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // k, w // k))
    arg = np.zeros((n, c, h // k, w // k, 2), dtype=int)
    for a in range(n):
        for ch in range(c):
            for i in range(h // k):
                for j in range(w // k):
                    best, pos = -math.inf, None
                    for di in range(k):
                        for dj in range(k):
                            v = x[a, ch, i * k + di, j * k + dj]
                            if v > best:
                                best, pos = v, (i * k + di, j * k + dj)
                    out[a, ch, i, j] = best
                    arg[a, ch, i, j] = pos
    return out, arg


def batchnorm_two_pass(x, gamma, beta, eps):
    n, c, h, w = x.shape
    out = np.zeros_like(x, dtype=float)
    for ch in range(c):
        vals = [x[a, ch, i, j] for a in range(n) for i in range(h) for j in range(w)]
        mu = sum(vals) / len(vals)
        var = sum((v - mu) ** 2 for v in vals) / len(vals)
        for a in range(n):
            for i in range(h):
                for j in range(w):
                    out[a, ch, i, j] = gamma[ch] * (x[a, ch, i, j] - mu) / math.sqrt(var + eps) + beta[ch]
    return out


def _src(d, in_size, out_size):
    s = (d + 0.5) * in_size / out_size - 0.5
    return min(max(s, 0.0), in_size - 1.0)


def bilinear_pixel(img, out_h, out_w):
    """Evaluate every output pixel from its four neighbours (half-pixel centres)."""
    h, w = img.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        sy = _src(i, h, out_h)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for j in range(out_w):
            sx = _src(j, w, out_w)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
            bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
            out[i, j] = top * (1 - fy) + bot * fy
    return out


def softmax_naive(z):
    m = max(z)
    e = [math.exp(v - m) for v in z]
    s = sum(e)
    return [v / s for v in e]


def cross_entropy_naive(z, label):
    return -math.log(math.exp(z[label]) / sum(math.exp(v) for v in z))


def variation_loops(psi):
    h, w = psi.shape
    total = 0.0
    for i in range(h):
        for j in range(w):
            if i + 1 < h:
                total += (psi[i + 1, j] - psi[i, j]) ** 2
            if j + 1 < w:
                total += (psi[i, j + 1] - psi[i, j]) ** 2
    return total


def area_loops(psi, lam4):
    h, w = psi.shape
    return sum(psi[i, j] ** lam4 for i in range(h) for j in range(w)) / (h * w)


def argmax_scan(values):
    best, idx = values[0], 0
    for i, v in enumerate(values):
        if v > best:
            best, idx = v, i
    return idx


def one_cycle_closed_form(step, total, max_lr, start_div, final_div, peak_fraction):
    peak = round(peak_fraction * total)
    lo, hi, end = max_lr / start_div, max_lr, max_lr / final_div
    if step <= peak:
        t = step / peak
        return hi + (lo - hi) * (1 + math.cos(math.pi * t)) / 2
    t = (step - peak) / (total - 1 - peak)
    return end + (hi - end) * (1 + math.cos(math.pi * t)) / 2


def feature_branch_steps(x, w, b, gamma, beta, out_hw, skip=True, bn=True, act="relu", eps=1e-5):
    """Feature branch composed step by step from the loop oracles above (train-mode BN)."""
    h = conv2d_loops(x, w, b)
    if bn:
        h = batchnorm_two_pass(h, gamma, beta, eps)
    if skip:
        h = h + x
    if act == "relu":
        h = np.where(h > 0, h, 0.0)
    else:
        h = np.vectorize(lambda v: 1.0 / (1.0 + math.exp(-v)))(h)
    n, c = h.shape[:2]
    out = np.zeros((n, c) + tuple(out_hw))
    for a in range(n):
        for ch in range(c):
            out[a, ch] = bilinear_pixel(h[a, ch], *out_hw)
    return out


def minmax_naive(values):
    flat = [float(v) for v in np.ravel(values)]
    lo, hi = min(flat), max(flat)
    if hi == lo:
        return np.zeros(np.shape(values))
    return (np.asarray(values, dtype=float) - lo) / (hi - lo)


def topv_naive(psi, v):
    h, w = psi.shape
    k = max(1, int(round(v / 100 * h * w)))
    ranked = sorted(range(h * w), key=lambda i: (-psi.flat[i], i))
    out = np.zeros((h, w))
    for i in ranked[:k]:
        out.flat[i] = psi.flat[i]
    return out


def average_drop_naive(clean, masked):
    return 100.0 / len(clean) * sum(max(0.0, c - m) / c for c, m in zip(clean, masked))


def increase_confidence_naive(clean, masked):
    return 100.0 / len(clean) * sum(1 for c, m in zip(clean, masked) if m > c)
