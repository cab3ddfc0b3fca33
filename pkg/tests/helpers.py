"""Shared numeric oracles for the test suite."""

from __future__ import annotations

import numpy as np

from tfcompress.tensor import Tensor


def numeric_grad(f, arrays, idx, eps=1e-6):
    """Central finite differences of scalar f(*arrays) w.r.t. arrays[idx]."""
    x = arrays[idx]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f(*arrays)
        x[i] = old - eps
        fm = f(*arrays)
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def gradcheck(op, arrays, seed=0, eps=1e-6):
    """Max relative error between autodiff and finite differences of <op(*x), R> for a random R."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*ts)
    r = np.random.default_rng(seed + 1000).normal(size=out.shape)
    (out * Tensor(r)).sum().backward()

    def f(*xs):
        return float((op(*[Tensor(x) for x in xs]).data * r).sum())

    worst = 0.0
    for k, t in enumerate(ts):
        num = numeric_grad(f, arrays, k, eps)
        ana = t.grad
        denom = max(np.abs(num).max(), np.abs(ana).max(), 1e-8)
        worst = max(worst, float(np.abs(num - ana).max() / denom))
    return worst


def naive_conv2d(x, w, b=None, stride=(1, 1), padding=(0, 0)):
    """Seven nested loops, no vectorisation."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for yi in range(ho):
                for xi in range(wo):
                    acc = 0.0 if b is None else float(b[oi])
                    for ci in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                yy, xx = yi * sh - ph + i, xi * sw - pw + j
                                if 0 <= yy < h and 0 <= xx < wd:
                                    acc += x[ni, ci, yy, xx] * w[oi, ci, i, j]
                    out[ni, oi, yi, xi] = acc
    return out


def naive_conv_transpose2d(x, w, b=None, stride=(1, 1), padding=(0, 0), output_padding=(0, 0)):
    """Scatter each input pixel times the kernel into the output, then crop the padding."""
    n, c, h, wd = x.shape
    _, o, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    hout = (h - 1) * sh - 2 * ph + kh + output_padding[0]
    wout = (wd - 1) * sw - 2 * pw + kw + output_padding[1]
    full = np.zeros((n, o, (h - 1) * sh + kh + output_padding[0], (wd - 1) * sw + kw + output_padding[1]))
    for ni in range(n):
        for ci in range(c):
            for yi in range(h):
                for xi in range(wd):
                    full[ni, :, yi * sh : yi * sh + kh, xi * sw : xi * sw + kw] += x[ni, ci, yi, xi] * w[ci]
    out = full[:, :, ph : ph + hout, pw : pw + wout]
    if b is not None:
        out = out + np.asarray(b)[None, :, None, None]
    return out
