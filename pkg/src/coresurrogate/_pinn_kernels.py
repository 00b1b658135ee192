"""Compiled single-step inference for the attention flux surrogate.

Weights arrive stacked over blocks: index ``0 .. L-1`` are encoder layers and
index ``L`` is the decoder block. Per-block arrays:

    wqkv (B, d, 3d)   fused Q|K|V projection, Q columns pre-scaled by 1/sqrt(d_h)
                      (the decoder's entry is passed split as dec_q (d, d), dec_kv (d, 2d))
    wo   (B, d, d)    output projection
    f1w (B, d, F), f1b (B, F), f2w (B, F, d), f2b (B, d)
    ln   (B, 4, d)    rows: ln1 gain, ln1 bias, ln2 gain, ln2 bias
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _layer_norm_rows(x, g, b, eps):
    n, d = x.shape
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            t = x[i, j] - mu
            var += t * t
        inv = 1.0 / math.sqrt(var / d + eps)
        for j in range(d):
            x[i, j] = (x[i, j] - mu) * inv * g[j] + b[j]


@njit(cache=True)
def _split_heads(m, col0, heads, dh):
    """Columns ``col0 .. col0 + heads*dh`` of ``m`` as a (heads, rows, dh) stack."""
    n = m.shape[0]
    out = np.empty((heads, n, dh))
    for hh in range(heads):
        for i in range(n):
            for t in range(dh):
                out[hh, i, t] = m[i, col0 + hh * dh + t]
    return out


@njit(cache=True)
def _block(x, q, k, v, wo, f1w, f1b, f2w, f2b, ln, eps):
    """Post-LN attention + feed-forward block; q/k/v are head-major stacks."""
    heads, n, dh = q.shape
    m = k.shape[1]
    d = x.shape[1]
    y = x.copy()
    for hh in range(heads):
        s = q[hh] @ k[hh].T
        for i in range(n):
            top = s[i, 0]
            for j in range(1, m):
                if s[i, j] > top:
                    top = s[i, j]
            tot = 0.0
            for j in range(m):
                s[i, j] = math.exp(s[i, j] - top)
                tot += s[i, j]
            for j in range(m):
                s[i, j] /= tot
        y += (s @ v[hh]) @ wo[hh * dh:(hh + 1) * dh]
    _layer_norm_rows(y, ln[0], ln[1], eps)
    f = y @ f1w
    for i in range(n):
        for j in range(f.shape[1]):
            t = f[i, j] + f1b[j]
            f[i, j] = t if t > 0.0 else 0.0
    z = y + f @ f2w
    for i in range(n):
        for j in range(d):
            z[i, j] += f2b[j]
    _layer_norm_rows(z, ln[2], ln[3], eps)
    return z


@njit(cache=True)
def predict_step(emb_buf, qkv_buf, start, window, pe, pe_qkv0, heads, wqkv, dec_q, dec_kv, wo, f1w,
                 f1b, f2w, f2b, ln, query, query_w, query_b, head_w, head_b, base, shift, floor,
                 eps):
    d = pe.shape[1]
    dh = d // heads
    n_blocks = wqkv.shape[0]
    x = emb_buf[start:start + window] + pe
    qkv = qkv_buf[start:start + window] + pe_qkv0
    x = _block(x, _split_heads(qkv, 0, heads, dh), _split_heads(qkv, d, heads, dh),
               _split_heads(qkv, 2 * d, heads, dh), wo[0], f1w[0], f1b[0], f2w[0], f2b[0],
               ln[0], eps)
    for b in range(1, n_blocks - 1):
        qkv = x @ wqkv[b]
        x = _block(x, _split_heads(qkv, 0, heads, dh), _split_heads(qkv, d, heads, dh),
                   _split_heads(qkv, 2 * d, heads, dh), wo[b], f1w[b], f1b[b], f2w[b], f2b[b],
                   ln[b], eps)
    dec = n_blocks - 1
    y = np.empty((1, d))
    y[0] = query @ query_w + query_b
    qd = y @ dec_q
    kv = x @ dec_kv
    y = _block(y, _split_heads(qd, 0, heads, dh), _split_heads(kv, 0, heads, dh),
               _split_heads(kv, d, heads, dh), wo[dec], f1w[dec], f1b[dec], f2w[dec], f2b[dec],
               ln[dec], eps)
    z = y[0] @ head_w + head_b
    out = np.empty(z.shape[0])
    for i in range(z.shape[0]):
        a = z[i] + shift
        sp = a + math.log1p(math.exp(-a)) if a > 0.0 else math.log1p(math.exp(a))
        out[i] = base[i] * sp + floor
    return out
