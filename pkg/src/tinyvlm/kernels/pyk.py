"""Pure-numpy fallback kernels, semantically identical to the compiled ones.

Bit patterns may differ from the compiled backend (summation order), but
each backend is individually deterministic run-to-run.
"""

import numpy as np


def layernorm_fwd(x, g, b, eps):
    mu = x.mean(axis=1)
    xc = x - mu[:, None]
    var = np.mean(xc * xc, axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    y = xc * rstd[:, None] * g + b
    return y, mu, rstd


def layernorm_bwd(x, g, mean, rstd, dy):
    xhat = (x - mean[:, None]) * rstd[:, None]
    dxhat = dy * g
    c1 = dxhat.mean(axis=1, keepdims=True)
    c2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = rstd[:, None] * (dxhat - c1 - xhat * c2)
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    return dx, dg, db


_GELU_K = 0.7978845608028654  # sqrt(2/pi)
_GELU_C = 0.044715


def gelu_fwd(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_K * (x + _GELU_C * x**3)))


def gelu_bwd(x, dy):
    u = _GELU_K * (x + _GELU_C * x**3)
    th = np.tanh(u)
    du = _GELU_K * (1.0 + 3.0 * _GELU_C * x * x)
    return dy * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)


def _allowed_mask(B, T, key_ok):
    causal = np.tril(np.ones((T, T), dtype=bool))
    return causal[None, None, :, :] & key_ok.astype(bool)[:, None, None, :]


def softmax_causal_fwd(scores, key_ok):
    B, H, T, _ = scores.shape
    allowed = _allowed_mask(B, T, key_ok)
    masked = np.where(allowed, scores, -np.inf)
    m = masked.max(axis=-1, keepdims=True)
    e = np.where(allowed, np.exp(masked - m), 0.0)  # masked slots exactly 0
    return e / e.sum(axis=-1, keepdims=True)


def softmax_bwd(probs, dprobs):
    dot = (probs * dprobs).sum(axis=-1, keepdims=True)
    return probs * (dprobs - dot)
