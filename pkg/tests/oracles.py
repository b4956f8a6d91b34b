"""Independent reference computations used by the tests.

Everything here is written with plain Python loops and ``math`` so it shares
no code path with the vectorised implementation under test.
"""

import math

import numpy as np


def loop_distance(a, b):
    out = np.zeros((len(a), len(b)))
    for n in range(len(a)):
        for m in range(len(b)):
            out[n, m] = math.sqrt(sum((float(x) - float(y)) ** 2 for x, y in zip(a[n], b[m])))
    return out


def loop_argmin(row):
    best, best_j = math.inf, 0
    for j, v in enumerate(row):
        if v < best:
            best, best_j = v, j
    return best_j


def loop_npairs(anchors, positives):
    n = len(anchors)
    total = 0.0
    for i in range(n):
        own = sum(float(x) * float(y) for x, y in zip(anchors[i], positives[i]))
        inner = 0.0
        for j in range(n):
            if j != i:
                other = sum(float(x) * float(y) for x, y in zip(anchors[i], positives[j]))
                inner += math.exp(other - own)
        total += math.log1p(inner)
    return total / n if n else 0.0


def loop_ocn(f1, f2):
    d = loop_distance(f1, f2)
    pos12 = [loop_argmin(d[n]) for n in range(len(f1))]
    pos21 = [loop_argmin(d[:, m]) for m in range(len(f2))]
    return loop_npairs(f1, [f2[j] for j in pos12]) + loop_npairs(f2, [f1[j] for j in pos21])


def loop_forward(dims, params, x, output_norm=True):
    """Per-element forward pass of the dense ReLU network."""
    layers, pos = [], 0
    for a, b in zip(dims[:-1], dims[1:]):
        w = [[params[pos + i * b + j] for j in range(b)] for i in range(a)]
        pos += a * b
        bias = [params[pos + j] for j in range(b)]
        pos += b
        layers.append((w, bias))
    out = []
    for row in x:
        h = [float(v) for v in row]
        for k, (w, bias) in enumerate(layers):
            z = [bias[j] + sum(h[i] * w[i][j] for i in range(len(h))) for j in range(len(bias))]
            h = [max(v, 0.0) for v in z] if k < len(layers) - 1 else z
        if output_norm:
            norm = math.sqrt(sum(v * v for v in h))
            h = [v / norm for v in h]
        out.append(h)
    return np.array(out)


def central_difference(fn, x, h=1e-4):
    """Gradient of scalar ``fn`` at array ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = fn(x)
        flat[i] = keep - h
        down = fn(x)
        flat[i] = keep
        g[i] = (up - down) / (2 * h)
    return grad


def max_relative_error(analytic, numeric, floor=1e-3, atol=1e-7):
    """Elementwise relative error; entries far below the gradient's scale
    are measured against ``floor * max|numeric|`` instead of themselves, and
    nothing is measured against less than ``atol`` (a gradient that is zero
    by construction leaves only round-off on both sides)."""
    analytic = np.asarray(analytic).ravel()
    numeric = np.asarray(numeric).ravel()
    scale = max(float(np.max(np.abs(numeric))) * floor, atol)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), scale)
    return float(np.max(np.abs(analytic - numeric) / denom))
