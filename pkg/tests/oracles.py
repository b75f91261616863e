"""Naive index-loop reference implementations.

Deliberately slow and written straight from the index definitions; they
share no code with the package's vectorized kernels.
"""
import math

import numpy as np


def matmul_loops(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def conv3d_loops(x, w, stride, pad):
    n, c, t, h, wd = x.shape
    co, _, kt, kh, kw = w.shape
    st, sh, sw = stride
    pt, ph, pw = pad
    ot = (t + 2 * pt - kt) // st + 1
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wd + 2 * pw - kw) // sw + 1
    out = np.zeros((n, co, ot, oh, ow))
    for b in range(n):
        for o in range(co):
            for i in range(ot):
                for j in range(oh):
                    for l in range(ow):
                        s = 0.0
                        for ci in range(c):
                            for a in range(kt):
                                for bb in range(kh):
                                    for cc in range(kw):
                                        ti = i * st + a - pt
                                        hi = j * sh + bb - ph
                                        wi = l * sw + cc - pw
                                        if 0 <= ti < t and 0 <= hi < h and 0 <= wi < wd:
                                            s += x[b, ci, ti, hi, wi] * w[o, ci, a, bb, cc]
                        out[b, o, i, j, l] = s
    return out


def causal_conv1d_loops(x, h, d):
    """y_t = sum_m x_{t - d*m} h_m, zero for negative indices."""
    n, c, t = x.shape
    co, _, k = h.shape
    out = np.zeros((n, co, t))
    for b in range(n):
        for o in range(co):
            for tt in range(t):
                s = 0.0
                for m in range(k):
                    src = tt - d * m
                    if src < 0:
                        continue
                    for ci in range(c):
                        s += x[b, ci, src] * h[o, ci, m]
                out[b, o, tt] = s
    return out


def pool3d_loops(x, kind, window, stride, pad):
    n, c, t, h, w = x.shape
    kt, kh, kw = window
    st, sh, sw = stride
    pt, ph, pw = pad
    ot = (t + 2 * pt - kt) // st + 1
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    out = np.zeros((n, c, ot, oh, ow))
    for b in range(n):
        for ch in range(c):
            for i in range(ot):
                for j in range(oh):
                    for l in range(ow):
                        vals = []
                        for a in range(kt):
                            for bb in range(kh):
                                for cc in range(kw):
                                    ti, hi, wi = i * st + a - pt, j * sh + bb - ph, l * sw + cc - pw
                                    inside = 0 <= ti < t and 0 <= hi < h and 0 <= wi < w
                                    if kind == "max":
                                        vals.append(x[b, ch, ti, hi, wi] if inside else -math.inf)
                                    else:
                                        vals.append(x[b, ch, ti, hi, wi] if inside else 0.0)
                        if kind == "max":
                            out[b, ch, i, j, l] = max(vals)
                        else:
                            s = 0.0
                            for v in vals:
                                s += v
                            out[b, ch, i, j, l] = s / len(vals)
    return out


def ltap_windows(k, T):
    """1-based inclusive frame indices of each local pooling window, clipped to [1, k]."""
    w = k // T
    windows = []
    for t in range(1, T + 1):
        lo, hi = t * w - w, t * w + w - 1
        windows.append([i for i in range(lo, hi + 1) if 1 <= i <= k])
    return windows


def ltap_loops(F, T):
    k, c = F.shape
    out = np.zeros((T, c))
    for t, idx in enumerate(ltap_windows(k, T)):
        for ch in range(c):
            s = 0.0
            for i in idx:
                s += F[i - 1, ch]
            out[t, ch] = s / len(idx)
    return out


def row_mean(X):
    T, C = X.shape
    z = np.zeros(T)
    for t in range(T):
        s = 0.0
        for i in range(C):
            s += X[t, i]
        z[t] = s / C
    return z


def excite_direct(z, w1, w2):
    hidden = np.maximum(matmul_loops(w1, z.reshape(-1, 1)), 0.0)
    logits = matmul_loops(w2, hidden).reshape(-1)
    return 1.0 / (1.0 + np.exp(-logits))


def row_scale(X, s):
    out = np.zeros_like(X)
    for t in range(X.shape[0]):
        for i in range(X.shape[1]):
            out[t, i] = s[t] * X[t, i]
    return out


def central_difference(f, x, h=1e-6):
    """Numerical gradient of scalar ``f`` at numpy array ``x``."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g
