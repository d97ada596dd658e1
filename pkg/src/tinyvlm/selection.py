"""Layer-selection strategies: heuristic placements and score-based top-k.

The sparse-uniform rule carries verbatim presets for the 32-layer model
(the published 8-layer list has an irregular 6-wide gap that no single
stride formula reproduces); non-preset (L, k) pairs fall back to
floor(i * L / k).
"""

from __future__ import annotations

import numpy as np

# (L, k) -> exact layer list; the 2- and 1-layer rules apply at any depth.
_SPARSE_PRESETS = {
    (32, 16): tuple(range(0, 32, 2)),
    (32, 8): (0, 4, 8, 12, 18, 22, 26, 30),
    (32, 6): (0, 6, 12, 18, 24, 30),
    (32, 4): (0, 10, 20, 30),
}


def _check_selection(layers, L: int) -> list[int]:
    layers = [int(i) for i in layers]
    if sorted(set(layers)) != layers:
        raise ValueError(f"selection must be sorted and unique, got {layers}")
    if layers and (layers[0] < 0 or layers[-1] >= L):
        raise ValueError(f"selection {layers} out of range for L={L}")
    return layers


def validate_selection(layers, L: int, allow_empty: bool = True) -> list[int]:
    layers = sorted(set(int(i) for i in layers))
    if not allow_empty and not layers:
        raise ValueError("selection must not be empty")
    return _check_selection(layers, L)


def sparse_uniform(L: int, k: int) -> list[int]:
    if not 1 <= k <= L:
        raise ValueError(f"need 1 <= k <= L, got k={k}, L={L}")
    if (L, k) in _SPARSE_PRESETS:
        return list(_SPARSE_PRESETS[(L, k)])
    if k == 1:
        return [L - 1]
    if k == 2:
        return [0, L - 1]
    return sorted({i * L // k for i in range(k)})


def consecutive(L: int, start: int, length: int) -> list[int]:
    if start < 0 or length < 1 or start + length > L:
        raise ValueError(f"consecutive block [{start}, {start + length}) exceeds L={L}")
    return list(range(start, start + length))


def hybrid_ends(L: int, k: int) -> list[int]:
    if k % 2 != 0:
        raise ValueError(f"hybrid selection needs an even k, got {k}")
    if k > L:
        raise ValueError(f"k={k} exceeds L={L}")
    half = k // 2
    return sorted(set(range(half)) | set(range(L - half, L)))


def top_k_by_score(scores, k: int, direction: str = "highest",
                   exclude=None) -> list[int]:
    """k layers with extreme scores among the non-excluded; ties to lower index."""
    values = np.asarray(getattr(scores, "scores", scores), dtype=np.float64)
    if direction not in ("highest", "lowest"):
        raise ValueError(f"direction must be 'highest' or 'lowest', got {direction!r}")
    excluded = set(int(i) for i in exclude) if exclude else set()
    candidates = [i for i in range(values.size) if i not in excluded]
    if k > len(candidates):
        raise ValueError(f"k={k} exceeds {len(candidates)} selectable layers")
    sign = -1.0 if direction == "highest" else 1.0
    ranked = sorted(candidates, key=lambda i: (sign * values[i], i))
    return sorted(ranked[:k])
