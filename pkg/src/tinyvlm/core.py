"""Seeded randomness and small numeric utilities.

Arrays are float64 C-contiguous numpy ndarrays throughout the package.
Randomness comes from numpy's PCG64 via ``make_rng``: the same seed gives
the same draw sequence within one build (cross-build bit-equality is not
promised). Reductions use numpy's fixed deterministic order, so repeated
runs in one environment are bit-identical.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator (PCG64) for the given 64-bit seed."""
    return np.random.Generator(np.random.PCG64(seed))


def gaussian_init(rng: np.random.Generator, shape, mean: float = 0.0,
                  std: float = 1.0) -> np.ndarray:
    """I.i.d. normal tensor of the given shape. std=0 degenerates to mean."""
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s <= 0 for s in shape):
        raise ValueError(f"invalid tensor shape {shape}: dims must be positive")
    if std == 0.0:
        return np.full(shape, float(mean))
    return rng.normal(mean, std, size=shape).astype(np.float64)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity of two flat vectors; raises on a zero-norm input."""
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise ZeroDivisionError("cosine similarity of a zero-norm vector")
    return float(np.dot(u, v)) / (nu * nv)


def finite_diff_gradient(loss_fn: Callable[[np.ndarray], float],
                         params: np.ndarray, h: float) -> np.ndarray:
    """Central-difference gradient estimate, one coordinate at a time.

    This is the package's gradient oracle: it never shares code with the
    analytic backward pass it is used to check.
    """
    if h <= 0:
        raise ValueError(f"step size h must be positive, got {h}")
    params = np.asarray(params, dtype=np.float64).ravel()
    grad = np.empty_like(params)
    work = params.copy()
    for j in range(params.size):
        orig = work[j]
        work[j] = orig + h
        f_plus = float(loss_fn(work))
        work[j] = orig - h
        f_minus = float(loss_fn(work))
        work[j] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise FloatingPointError(f"loss_fn returned non-finite value at coordinate {j}")
        grad[j] = (f_plus - f_minus) / (2.0 * h)
    return grad


def flatten_tensors(tensors: dict[str, np.ndarray], names: list[str]) -> np.ndarray:
    """Concatenate the named tensors into one flat vector (given name order)."""
    return np.concatenate([tensors[n].ravel() for n in names])


def unflatten_tensors(vec: np.ndarray, shapes: dict[str, tuple],
                      names: list[str]) -> dict[str, np.ndarray]:
    """Inverse of flatten_tensors for the given shapes/name order."""
    out = {}
    off = 0
    for n in names:
        size = int(np.prod(shapes[n]))
        out[n] = vec[off:off + size].reshape(shapes[n]).copy()
        off += size
    if off != vec.size:
        raise ValueError(f"vector length {vec.size} does not match shapes total {off}")
    return out
