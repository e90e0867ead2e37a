"""Independent reference implementations used as test oracles.

Everything here works on plain Python floats with explicit loops so it shares
no code path with the vectorized implementation under test.
"""
from __future__ import annotations

import math

import numpy as np


def _vec(a) -> list:
    return [float(v) for v in np.asarray(a).ravel()]


def _mat(a) -> list:
    return [[float(v) for v in row] for row in np.asarray(a)]


def linear(v, w, b):
    w = _mat(w)
    b = _vec(b)
    return [b[j] + sum(v[i] * w[i][j] for i in range(len(v))) for j in range(len(b))]


def layernorm(v, g, b, eps):
    g, b = _vec(g), _vec(b)
    n = len(v)
    mu = sum(v) / n
    var = sum((x - mu) ** 2 for x in v) / n
    return [(x - mu) / math.sqrt(var + eps) * g[i] + b[i] for i, x in enumerate(v)]


def gelu(x):
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def softmax(row):
    m = max(row)
    e = [math.exp(x - m) for x in row]
    s = sum(e)
    return [x / s for x in e]


def mhsa(xs, p, prefix, heads):
    """xs: list of token vectors."""
    d = len(xs[0])
    dh = d // heads
    q = [linear(x, p[f"{prefix}.q.weight"], p[f"{prefix}.q.bias"]) for x in xs]
    k = [linear(x, p[f"{prefix}.k.weight"], p[f"{prefix}.k.bias"]) for x in xs]
    v = [linear(x, p[f"{prefix}.v.weight"], p[f"{prefix}.v.bias"]) for x in xs]
    ctx = [[0.0] * d for _ in xs]
    for h in range(heads):
        lo = h * dh
        for i in range(len(xs)):
            scores = [sum(q[i][lo + a] * k[j][lo + a] for a in range(dh)) / math.sqrt(dh)
                      for j in range(len(xs))]
            att = softmax(scores)
            for a in range(dh):
                ctx[i][lo + a] = sum(att[j] * v[j][lo + a] for j in range(len(xs)))
    return [linear(c, p[f"{prefix}.proj.weight"], p[f"{prefix}.proj.bias"]) for c in ctx]


def adapter(v, p, layer):
    a = f"adapters.{layer}"
    h = [max(0.0, z) for z in linear(v, p[f"{a}.down_proj.weight"], p[f"{a}.down_proj.bias"])]
    return linear(h, p[f"{a}.up_proj.weight"], p[f"{a}.up_proj.bias"])


def block(xs, p, layer, heads, eps=1e-6, tuning="vanilla", scale=0.0):
    b = f"blocks.{layer}"
    normed = [layernorm(x, p[f"{b}.norm1.weight"], p[f"{b}.norm1.bias"], eps) for x in xs]
    att = mhsa(normed, p, f"{b}.attn", heads)
    xp = [[x[i] + a[i] for i in range(len(x))] for x, a in zip(xs, att)]
    out = []
    for t in xp:
        n2 = layernorm(t, p[f"{b}.norm2.weight"], p[f"{b}.norm2.bias"], eps)
        hid = [gelu(z) for z in linear(n2, p[f"{b}.mlp.fc1.weight"], p[f"{b}.mlp.fc1.bias"])]
        m = linear(hid, p[f"{b}.mlp.fc2.weight"], p[f"{b}.mlp.fc2.bias"])
        if tuning == "parallel":
            br = adapter(n2, p, layer)
        elif tuning == "sequential":
            br = adapter(m, p, layer)
        else:
            br = [0.0] * len(m)
        out.append([m[i] + scale * br[i] + t[i] for i in range(len(t))])
    return out


def patches(image, patch):
    """[H, W, c] image -> list of flattened patches (row-major over the grid)."""
    img = np.asarray(image)
    h = img.shape[0]
    out = []
    for gi in range(h // patch):
        for gj in range(h // patch):
            out.append([float(img[gi * patch + py, gj * patch + px, ch])
                        for py in range(patch) for px in range(patch) for ch in range(img.shape[2])])
    return out


def encode(image, p, cfg, prompts=None, deep=True):
    """CLS feature of one image; ``prompts`` maps layer -> [p, d] array."""
    toks = [linear(pt, p["patch_embed.weight"], p["patch_embed.bias"]) for pt in patches(image, cfg.patch_size)]
    toks = [_vec(r) for r in np.asarray(p["cls_token"])] + toks
    pos = _mat(p["pos_embed"])
    toks = [[t[i] + pos[j][i] for i in range(len(t))] for j, t in enumerate(toks)]
    n_p = 0
    if prompts is not None and not deep:
        n_p = len(prompts[0])
        toks = _mat(prompts[0]) + toks
    for layer in range(cfg.num_layers):
        if prompts is not None and deep:
            seq = _mat(prompts[layer]) + toks
            seq = block(seq, p, layer, cfg.num_heads)
            toks = seq[len(prompts[layer]):]
        else:
            toks = block(toks, p, layer, cfg.num_heads)
    return layernorm(toks[n_p], p["norm.weight"], p["norm.bias"], 1e-6)


def classify_eval(feat, p, buffers, eps=1e-5):
    mean, var = _vec(buffers["head_norm.running_mean"]), _vec(buffers["head_norm.running_var"])
    z = [(f - mean[i]) / math.sqrt(var[i] + eps) for i, f in enumerate(feat)]
    return linear(z, p["head.weight"], p["head.bias"])


def numerical_grad(f, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-7) -> float:
    """Max elementwise |a-b| / max(|a|, |b|, floor)."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
