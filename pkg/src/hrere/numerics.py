"""Small numeric helpers shared by the embedding and encoder code."""

from __future__ import annotations

import numpy as np

# probabilities are floored here before log; a clamped entry contributes
# zero gradient
LOG_FLOOR = 1e-12

# additive mask value for softmax over padded positions; large but finite
# so max-subtraction never meets inf - inf
NEG_INF = -1e30


def sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softmax(x, axis=-1):
    """Max-subtracted softmax along one axis."""
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def clamped_log(p):
    return np.log(np.maximum(p, LOG_FLOOR))
