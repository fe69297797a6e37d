"""Slow, loop-based reference implementations used as test oracles."""

import numpy as np

from oodgate.engine.layers import Conv2d, Dense, Dropout, Flatten, GlobalAvgPool, MaxPool, ReLU


def conv_loop(x, w, b, stride, pad):
    h, wd, cin = x.shape
    cout, k, _, _ = w.shape
    xp = np.zeros((h + 2 * pad, wd + 2 * pad, cin))
    xp[pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((ho, wo, cout))
    for i in range(ho):
        for j in range(wo):
            for o in range(cout):
                acc = b[o]
                for di in range(k):
                    for dj in range(k):
                        for c in range(cin):
                            acc += xp[i * stride + di, j * stride + dj, c] * w[o, di, dj, c]
                out[i, j, o] = acc
    return out


def pool_loop(x, k, s):
    h, w, c = x.shape
    ho, wo = (h - k) // s + 1, (w - k) // s + 1
    out = np.empty((ho, wo, c))
    for i in range(ho):
        for j in range(wo):
            for ch in range(c):
                out[i, j, ch] = max(x[i * s + a, j * s + bb, ch] for a in range(k) for bb in range(k))
    return out


def forward_loop(spec, params, x):
    """Per-sample forward pass written with explicit loops; returns the logits."""
    a = np.asarray(x, dtype=np.float64)
    for i, layer in enumerate(spec.layers):
        w, b = params.weights[i], params.biases[i]
        if isinstance(layer, Dense):
            a = np.array([sum(w[o, j] * a[j] for j in range(len(a))) + b[o] for o in range(w.shape[0])])
        elif isinstance(layer, Conv2d):
            a = conv_loop(a, w, b, layer.stride, layer.pad)
        elif isinstance(layer, ReLU):
            a = np.where(a > 0, a, 0.0)
        elif isinstance(layer, MaxPool):
            a = pool_loop(a, layer.kernel, layer.step)
        elif isinstance(layer, GlobalAvgPool):
            h, wd, c = a.shape
            a = np.array([sum(a[p, q, ch] for p in range(h) for q in range(wd)) / (h * wd) for ch in range(c)])
        elif isinstance(layer, Flatten):
            a = a.reshape(-1)
        elif isinstance(layer, Dropout):
            pass
    return a


def entropy_loop(p):
    return -sum(v * np.log(v) for v in p if v > 0)


def auroc_pairs(pos, neg):
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


def mahalanobis_loop(z, means, precisions):
    best = np.inf
    for mu, prec in zip(means, precisions):
        d = z - mu
        q = 0.0
        for i in range(len(d)):
            for j in range(len(d)):
                q += d[i] * prec[i, j] * d[j]
        best = min(best, q)
    return -best


def central_difference(f, x, h=1e-5):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def random_model(rng, kind):
    """Small randomly initialised TinyConv-shaped or MLP network plus a matching input."""
    from oodgate.engine import init_params, mlp
    from oodgate.engine.layers import ModelSpec

    k = int(rng.integers(2, 5))
    if kind == "conv":
        size, cin = int(rng.integers(5, 9)), int(rng.integers(1, 3))
        c1, c2 = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        layers = (
            Conv2d(cin, c1, 3, 1, 1), ReLU(), MaxPool(2),
            Conv2d(c1, c2, 3, 1, 1), ReLU(), GlobalAvgPool(), Dropout(0.3), Dense(c2, k),
        )
        spec = ModelSpec((size, size, cin), layers, k)
        x = rng.uniform(0, 1, (size, size, cin))
    else:
        d = int(rng.integers(2, 8))
        spec = mlp(d, tuple(int(h) for h in rng.integers(2, 8, size=int(rng.integers(1, 3)))), k, 0.2)
        x = rng.standard_normal(d)
    params = init_params(spec, int(rng.integers(0, 2**31)))
    # non-zero biases so ReLUs are not all aligned at the origin
    for b in params.biases:
        if b is not None:
            b[:] = rng.normal(0, 0.1, b.shape)
    return spec, params, x
