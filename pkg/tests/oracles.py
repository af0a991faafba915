"""Independent reference implementations used as test oracles.

Everything here is deliberately naive (nested loops, O(2^n) enumeration,
finite differences) and shares no code with the library paths it checks.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def conv2d_loops(x, weight, bias, stride):
    """Direct nested-loop "same"-padded cross-correlation."""
    n, c_in, h, w = x.shape
    c_out, _, k, _ = weight.shape
    out_h = math.ceil(h / stride)
    out_w = math.ceil(w / stride)
    pad_h = max((out_h - 1) * stride + k - h, 0)
    pad_w = max((out_w - 1) * stride + k - w, 0)
    ph, pw = pad_h // 2, pad_w // 2
    y = np.zeros((n, c_out, out_h, out_w), dtype=np.float64)
    for b in range(n):
        for o in range(c_out):
            for i in range(out_h):
                for j in range(out_w):
                    acc = 0.0
                    for c in range(c_in):
                        for ki in range(k):
                            for kj in range(k):
                                src_i = i * stride + ki - ph
                                src_j = j * stride + kj - pw
                                if 0 <= src_i < h and 0 <= src_j < w:
                                    acc += x[b, c, src_i, src_j] * weight[o, c, ki, kj]
                    y[b, o, i, j] = acc + bias[o]
    return y


def dense_loops(x, weight, bias):
    """Nested-loop matrix multiply."""
    n, d = x.shape
    _, m = weight.shape
    y = np.zeros((n, m), dtype=np.float64)
    for b in range(n):
        for j in range(m):
            acc = 0.0
            for i in range(d):
                acc += x[b, i] * weight[i, j]
            y[b, j] = acc + bias[j]
    return y


def finite_diff_grad(f, x, eps=1e-6):
    """Central-difference gradient of scalar f at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        g[i] = (hi - lo) / (2.0 * eps)
    return grad


def rel_error(a, b):
    """Normwise relative error used by every gradient check."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def percentile_linear(values, q):
    """Percentile with linear interpolation between order statistics."""
    v = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    if v.size == 1:
        return float(v[0])
    pos = (q / 100.0) * (v.size - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, v.size - 1)
    frac = pos - lo
    return float(v[lo] * (1.0 - frac) + v[hi] * frac)


def bilinear_point(image, r, c):
    """Corner-aligned bilinear sample of a 2-D image at fractional (r, c)."""
    h, w = image.shape
    r = min(max(r, 0.0), h - 1.0)
    c = min(max(c, 0.0), w - 1.0)
    r0, c0 = int(math.floor(r)), int(math.floor(c))
    r1, c1 = min(r0 + 1, h - 1), min(c0 + 1, w - 1)
    fr, fc = r - r0, c - c0
    top = image[r0, c0] * (1 - fc) + image[r0, c1] * fc
    bot = image[r1, c0] * (1 - fc) + image[r1, c1] * fc
    return top * (1 - fr) + bot * fr


def spearman_by_hand(x, y):
    """Mid-ranks computed by sorting, then a textbook Pearson correlation."""

    def midranks(v):
        v = np.asarray(v, dtype=np.float64)
        order = np.argsort(v, kind="stable")
        ranks = np.empty(v.size, dtype=np.float64)
        i = 0
        while i < v.size:
            j = i
            while j + 1 < v.size and v[order[j + 1]] == v[order[i]]:
                j += 1
            ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
            i = j + 1
        return ranks

    rx, ry = midranks(x), midranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    return float((rx * ry).sum() / math.sqrt((rx * rx).sum() * (ry * ry).sum()))


def shapley_enumeration(f, x, references):
    """Exact Shapley values by O(2^n) subset enumeration.

    "Feature absent" means the feature takes its reference value; the game
    value is f of the composite input, averaged over references afterwards.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    n = x.size
    values = np.zeros(n, dtype=np.float64)
    for ref in references:
        ref = np.asarray(ref, dtype=np.float64).reshape(-1)
        for i in range(n):
            others = [j for j in range(n) if j != i]
            for size in range(n):
                weight = (math.factorial(size) * math.factorial(n - size - 1)
                          / math.factorial(n))
                for subset in itertools.combinations(others, size):
                    base = ref.copy()
                    base[list(subset)] = x[list(subset)]
                    with_i = base.copy()
                    with_i[i] = x[i]
                    values[i] += weight * (f(with_i) - f(base))
    return values / len(references)
