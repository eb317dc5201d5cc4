"""Independent oracles shared by the test modules."""

import numpy as np
from scipy.special import logsumexp


def reference_logits(weights, biases, x):
    """Plain ReLU MLP forward, written without the package."""
    h = np.asarray(x, dtype=np.float64)
    for i, (w, b) in enumerate(zip(weights, biases)):
        h = h @ w + b
        if i < len(weights) - 1:
            h = np.where(h > 0, h, 0.0)
    return h


def reference_loss(weights, biases, x, y, tau):
    z = reference_logits(weights, biases, x) / tau
    return float(np.mean(logsumexp(z, axis=1) - z[np.arange(len(y)), y]))


def central_difference(f, array, step=1e-4):
    """Gradient of ``f()`` w.r.t. every entry of ``array`` (perturbed in place)."""
    grad = np.zeros_like(array)
    flat, gflat = array.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


def rel_error(a, b):
    """Norm-wise relative error ``|a - b| / max(|a|, |b|)``."""
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def kink_margin(weights, biases, x):
    """Smallest |pre-activation| of any hidden ReLU unit.

    Central differences are only valid when no unit sits within one step
    of its kink, so gradient checks redraw inputs below a margin.
    """
    h = np.asarray(x, dtype=np.float64)
    margin = np.inf
    for w, b in zip(weights[:-1], biases[:-1]):
        h = h @ w + b
        margin = min(margin, float(np.abs(h).min()))
        h = np.where(h > 0, h, 0.0)
    return margin


def brute_force_f1(counts):
    """Per-class precision/recall/F1 by explicit loops, 0/0 taken as 0."""
    n = len(counts)
    out = []
    for c in range(n):
        tp = counts[c][c]
        pred = sum(counts[g][c] for g in range(n))
        gold = sum(counts[c][p] for p in range(n))
        p = tp / pred if pred else 0.0
        r = tp / gold if gold else 0.0
        out.append(2 * p * r / (p + r) if p + r else 0.0)
    return out
