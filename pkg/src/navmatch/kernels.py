"""Forward/backward numpy kernels for the navigator and the query extractor.

Every ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
takes the upstream gradient and the cache.
"""

from __future__ import annotations

import numpy as np

LN_EPS = 1e-5
NEG_INF = -1e30


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def linear_forward(x, w, b):
    return x @ w + b, x


def linear_backward(dy, x, w):
    d_in = w.shape[0]
    flat_x = x.reshape(-1, d_in)
    flat_dy = dy.reshape(-1, dy.shape[-1])
    return dy @ w.T, flat_x.T @ flat_dy, flat_dy.sum(axis=0)


def layer_norm_forward(x, gain, bias, eps=LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv, gain)


def layer_norm_backward(dy, cache):
    xhat, inv, gain = cache
    d = xhat.shape[-1]
    dgain = (dy * xhat).reshape(-1, d).sum(axis=0)
    dbias = dy.reshape(-1, d).sum(axis=0)
    dxhat = dy * gain
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain, dbias


def _split(x, heads):
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge(x):
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def attention_forward(x, p, heads, key_bias=None):
    """Bidirectional multi-head self-attention.

    ``key_bias`` (B, L) is added to the scores of every query row; it only
    hides batch padding, never sequence tokens.
    """
    q = _split(x @ p["wq"] + p["bq"], heads)
    k = _split(x @ p["wk"] + p["bk"], heads)
    v = _split(x @ p["wv"] + p["bv"], heads)
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    if key_bias is not None:
        scores = scores + key_bias[:, None, None, :]
    a = softmax(scores)
    o = _merge(a @ v)
    out = o @ p["wo"] + p["bo"]
    return out, (x, q, k, v, a, o, scale)


def attention_backward(dout, cache, p, heads):
    x, q, k, v, a, o, scale = cache
    d = x.shape[-1]
    g = {}
    flat_o = o.reshape(-1, d)
    flat_dout = dout.reshape(-1, d)
    g["wo"] = flat_o.T @ flat_dout
    g["bo"] = flat_dout.sum(axis=0)
    do = _split(dout @ p["wo"].T, heads)
    da = do @ v.transpose(0, 1, 3, 2)
    dv = a.transpose(0, 1, 3, 2) @ do
    ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    flat_x = x.reshape(-1, d)
    dx = np.zeros_like(x)
    for name, dh in (("q", dq), ("k", dk), ("v", dv)):
        dm = _merge(dh)
        flat = dm.reshape(-1, d)
        g["w" + name] = flat_x.T @ flat
        g["b" + name] = flat.sum(axis=0)
        dx += dm @ p["w" + name].T
    return dx, g


def ffn_forward(x, p):
    pre = x @ p["w1"] + p["b1"]
    h = np.maximum(pre, 0)
    return h @ p["w2"] + p["b2"], (x, pre, h)


def ffn_backward(dy, cache, p):
    x, pre, h = cache
    g = {}
    dh, g["w2"], g["b2"] = linear_backward(dy, h, p["w2"])
    dpre = dh * (pre > 0)
    dx, g["w1"], g["b1"] = linear_backward(dpre, x, p["w1"])
    return dx, g


def decoder_layer_forward(x, p, heads, key_bias=None):
    """Post-residual layer: LN(MHA(x) + x), then LN(FFN(h) + h)."""
    att, c_att = attention_forward(x, p, heads, key_bias)
    h_att, c_ln1 = layer_norm_forward(att + x, p["ln1.gain"], p["ln1.bias"])
    f, c_ffn = ffn_forward(h_att, p)
    out, c_ln2 = layer_norm_forward(f + h_att, p["ln2.gain"], p["ln2.bias"])
    return out, (c_att, c_ln1, c_ffn, c_ln2)


def decoder_layer_backward(dout, cache, p, heads):
    c_att, c_ln1, c_ffn, c_ln2 = cache
    g = {}
    dsum2, g["ln2.gain"], g["ln2.bias"] = layer_norm_backward(dout, c_ln2)
    dh_att, g_ffn = ffn_backward(dsum2, c_ffn, p)
    dh_att = dh_att + dsum2
    dsum1, g["ln1.gain"], g["ln1.bias"] = layer_norm_backward(dh_att, c_ln1)
    dx, g_att = attention_backward(dsum1, c_att, p, heads)
    dx = dx + dsum1
    g.update(g_ffn)
    g.update(g_att)
    return dx, g


def normalized_adjacency(adjacency, n=None):
    """D^-1/2 (A + I) D^-1/2 for an adjacency-list graph, padded to ``n`` rows."""
    k = len(adjacency)
    n = k if n is None else n
    a = np.zeros((n, n))
    for u, nbrs in enumerate(adjacency):
        a[u, u] = 1.0
        for w in nbrs:
            a[u, w] = 1.0
    deg = a.sum(axis=1)
    inv = np.zeros(n)
    inv[:k] = 1.0 / np.sqrt(deg[:k])
    return a * inv[:, None] * inv[None, :]


def gcn_forward(h0, a_hat, weights, node_mask):
    """Stacked ReLU(Â H W) layers then a max over real nodes.

    h0: (B, n, d); a_hat: (B, n, n); node_mask: (B, n) boolean.
    """
    caches = []
    h = h0
    for w in weights:
        ah = a_hat @ h
        z = ah @ w
        caches.append((ah, z))
        h = np.maximum(z, 0)
    masked = np.where(node_mask[:, :, None], h, NEG_INF)
    arg = masked.argmax(axis=1)
    out = np.take_along_axis(masked, arg[:, None, :], axis=1)[:, 0, :]
    return out, (caches, arg, h.shape)


def gcn_backward(dout, cache, a_hat, weights):
    caches, arg, shape = cache
    dh = np.zeros(shape, dtype=dout.dtype)
    b_idx = np.arange(shape[0])[:, None]
    d_idx = np.arange(shape[2])[None, :]
    dh[b_idx, arg, d_idx] = dout
    dws = [None] * len(weights)
    for layer in range(len(weights) - 1, -1, -1):
        ah, z = caches[layer]
        dz = dh * (z > 0)
        dws[layer] = ah.reshape(-1, ah.shape[-1]).T @ dz.reshape(-1, dz.shape[-1])
        dh = a_hat.transpose(0, 2, 1) @ (dz @ weights[layer].T)
    return dh, dws
