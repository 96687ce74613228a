"""Independent brute-force reference implementations used by the tests.

Nothing here imports the code under test beyond plain data containers.
"""
from __future__ import annotations

import math

import numpy as np


def conv2d_loops(x, weights, biases, stride, padding):
    """Direct nested-loop convolution; weights are (out, kh, kw, in)."""
    h, w, cin = x.shape
    cout, kh, kw, _ = weights.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((ho, wo, cout))
    for i in range(ho):
        for j in range(wo):
            for o in range(cout):
                acc = biases[o]
                for a in range(kh):
                    for b in range(kw):
                        r, c = i * stride + a - padding, j * stride + b - padding
                        if 0 <= r < h and 0 <= c < w:
                            for ch in range(cin):
                                acc += x[r, c, ch] * weights[o, a, b, ch]
                out[i, j, o] = acc
    return out


def maxpool_loops(x, window, stride):
    h, w, c = x.shape
    wh, ww = window
    ho, wo = (h - wh) // stride + 1, (w - ww) // stride + 1
    out = np.empty((ho, wo, c))
    for i in range(ho):
        for j in range(wo):
            for ch in range(c):
                out[i, j, ch] = max(
                    x[i * stride + a, j * stride + b, ch] for a in range(wh) for b in range(ww)
                )
    return out


def forward_loops(spec: dict, x):
    """Run a model *document* (the JSON dict) with the loop oracles."""
    for layer in spec["layers"]:
        kind = layer["kind"]
        if kind == "conv2d":
            kh, kw = layer["kernel"]
            wts = np.asarray(layer["weights"]).reshape(layer["out_channels"], kh, kw, layer["in_channels"])
            x = conv2d_loops(x, wts, np.asarray(layer["biases"]), layer.get("stride", 1), layer.get("padding", 0))
        elif kind == "relu":
            x = np.where(x > 0, x, 0.0)
        elif kind == "maxpool":
            x = maxpool_loops(x, tuple(layer["window"]), layer["stride"])
        elif kind == "flatten":
            x = np.array([x[idx] for idx in np.ndindex(*x.shape)])
        elif kind == "dense":
            wts = np.asarray(layer["weights"]).reshape(layer["out_dim"], layer["in_dim"])
            x = np.array([sum(wts[o, i] * x[i] for i in range(layer["in_dim"])) + layer["biases"][o]
                          for o in range(layer["out_dim"])])
    return np.array([x[idx] for idx in np.ndindex(*x.shape)])


def objective_pairwise(groups, V, alpha):
    """D_B - alpha/k * sum_i D_W_i evaluated by explicit pair sums."""
    V = np.atleast_2d(V)
    proj = [[V @ np.asarray(x) for x in g] for g in groups]
    k = len(groups)
    num = 0.0
    den = 0
    for r in range(k - 1):
        for s in range(r + 1, k):
            for px in proj[r]:
                for py in proj[s]:
                    num += float(np.sum((px - py) ** 2))
            den += len(proj[r]) * len(proj[s])
    d_b = num / den
    d_w_sum = 0.0
    for p in proj:
        m = len(p)
        if m < 2:
            continue
        acc = 0.0
        for a in range(m):
            for b in range(m):
                if a != b:
                    acc += float(np.sum((p[a] - p[b]) ** 2))
        d_w_sum += acc / (m * (m - 1))
    return d_b - alpha / k * d_w_sum


def nearest_pair(query, members, exclude=None):
    """Double loop over (member, image); strict < keeps the first minimum."""
    best = (math.inf, None, None)
    for member, images in members:
        for image, vec in images:
            if exclude == (member, image):
                continue
            d = math.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(query, vec)))
            if d < best[0]:
                best = (d, member, image)
    return best


def mfmo_at(fm_distances, stranger_distances, t):
    mf = sum(1 for d in fm_distances if d > t) / len(fm_distances)
    mo = sum(1 for d in stranger_distances if d <= t) / len(stranger_distances)
    return 100.0 * mf + 100.0 * mo


def dense_sweep_min(fm_distances, stranger_distances, points=10_000):
    top = max(list(fm_distances) + list(stranger_distances)) + 1.0
    fm = np.sort(np.asarray(fm_distances, dtype=float))
    st = np.sort(np.asarray(stranger_distances, dtype=float))
    ts = np.linspace(0.0, top, points)
    mf = (len(fm) - np.searchsorted(fm, ts, side="right")) / len(fm)
    mo = np.searchsorted(st, ts, side="right") / len(st)
    return float(np.min(100.0 * mf + 100.0 * mo))


def exact_sweep_min(fm_distances, stranger_distances):
    """MF+MO is constant on [0, d_1) and on each [d_i, d_{i+1}); evaluate one point per piece."""
    points = [0.0] + sorted(set(fm_distances) | set(stranger_distances))
    return min(mfmo_at(fm_distances, stranger_distances, t) for t in points)
