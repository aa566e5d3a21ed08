"""Independent reference implementations used as test oracles.

Everything here is written with plain Python loops or a different formulation
from the package code, so agreement is evidence rather than repetition.
"""
import math
from collections import defaultdict

import numpy as np


def naive_matmul(a, b):
    n, k = len(a), len(a[0])
    m = len(b[0])
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i][t] * b[t][j]
            out[i][j] = s
    return out


def unpack_layers(layer_sizes, w):
    """Weight matrices (fan_out x fan_in, row-major) followed by biases, per layer."""
    layers, pos = [], 0
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        W = [[w[pos + r * fan_in + c] for c in range(fan_in)] for r in range(fan_out)]
        pos += fan_in * fan_out
        b = [w[pos + r] for r in range(fan_out)]
        pos += fan_out
        layers.append((W, b))
    assert pos == len(w)
    return layers


def naive_forward(layer_sizes, w, x, activation="relu"):
    """Score of one input vector, computed neuron by neuron."""
    h = list(x)
    layers = unpack_layers(layer_sizes, w)
    for li, (W, b) in enumerate(layers):
        z = [sum(W[r][c] * h[c] for c in range(len(h))) + b[r] for r in range(len(b))]
        if li < len(layers) - 1:
            h = [max(v, 0.0) for v in z] if activation == "relu" else [math.tanh(v) for v in z]
        else:
            h = z
    return 1.0 / (1.0 + math.exp(-h[0]))


def naive_bce(scores, labels, clamp=1e-7):
    total = 0.0
    for s, y in zip(scores, labels):
        s = min(max(s, clamp), 1.0 - clamp)
        total += -(y * math.log(s) + (1 - y) * math.log(1 - s))
    return total / len(scores)


def gaussian_kl(theta_a, sigma_a, theta, sigma):
    """KL(N(theta_a, sigma_a^2) || N(theta, sigma^2)) summed over coordinates."""
    total = 0.0
    for ma, sa, m, s in zip(theta_a, sigma_a, theta, sigma):
        total += math.log(s / sa) + (sa * sa + (ma - m) ** 2) / (2 * s * s) - 0.5
    return total


def discrete_sufficiency_gap(scores, labels, groups):
    """Exact E_A E_{X|A} |E[Y | f] - E[Y | f, A]| for finitely many score values."""
    by_score = defaultdict(list)
    by_score_group = defaultdict(list)
    by_group = defaultdict(int)
    for s, y, g in zip(scores, labels, groups):
        by_score[s].append(y)
        by_score_group[(s, g)].append(y)
        by_group[g] += 1
    per = {}
    for g, n_g in by_group.items():
        gap = 0.0
        for (s, gg), ys in by_score_group.items():
            if gg != g:
                continue
            glob = sum(by_score[s]) / len(by_score[s])
            loc = sum(ys) / len(ys)
            gap += len(ys) / n_g * abs(glob - loc)
        per[g] = gap
    return sum(per.values()) / len(per), per


def discrete_dp_gap(scores, groups):
    overall = sum(scores) / len(scores)
    gs = sorted(set(groups), key=str)
    diffs = []
    for g in gs:
        vals = [s for s, gg in zip(scores, groups) if gg == g]
        diffs.append(abs(overall - sum(vals) / len(vals)))
    return sum(diffs) / len(diffs)


def discrete_eo_gap(scores, labels, groups):
    gs = sorted(set(groups), key=str)
    per_class = []
    for y in (0, 1):
        cls = [s for s, yy in zip(scores, labels) if yy == y]
        ref = sum(cls) / len(cls)
        diffs = []
        for g in gs:
            vals = [s for s, yy, gg in zip(scores, labels, groups) if yy == y and gg == g]
            if vals:
                diffs.append(abs(ref - sum(vals) / len(vals)))
        per_class.append(sum(diffs) / len(diffs))
    return sum(per_class) / 2


def central_difference(fn, x, h):
    """Gradient of scalar ``fn`` at vector ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        up, dn = x.copy(), x.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (fn(up) - fn(dn)) / (2 * h)
    return g


def five_point_difference(fn, x, h):
    """Fourth-order central difference; tolerates larger ``h`` for less rounding error."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        vals = []
        for k in (-2, -1, 1, 2):
            y = x.copy()
            y[i] += k * h
            vals.append(fn(y))
        g[i] = (vals[0] - 8 * vals[1] + 8 * vals[2] - vals[3]) / (12 * h)
    return g
