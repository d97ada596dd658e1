"""Checkpoint surgery: layer reversion and layer pruning.

Pruning removes whole blocks with no weight adjustment; survivors are
renumbered in order and ``config.pruned_from`` accumulates the dropped
indices in the numbering of the original (never-pruned) ancestor, so the
provenance stays exact across repeated prunes.
"""

from __future__ import annotations

from .checkpoint import Checkpoint, LAYER_TENSORS
from .metrics import ImportanceScores
from .selection import top_k_by_score, validate_selection


def revert_layers(tuned: Checkpoint, backbone: Checkpoint, layers) -> Checkpoint:
    """Replace the listed layers' tensors in ``tuned`` with backbone values."""
    if tuned.config.to_json() != backbone.config.to_json():
        raise ValueError("revert_layers requires identical configs")
    if tuned.adapter_layers or backbone.adapter_layers:
        raise ValueError("merge adapters before reverting layers")
    layers = validate_selection(layers, tuned.config.n_layers)
    out = tuned.clone()
    for i in layers:
        for name in LAYER_TENSORS:
            out.tensors[f"layers.{i}.{name}"] = backbone.tensors[f"layers.{i}.{name}"].copy()
    out.validate()
    return out


def _original_indices(ckpt: Checkpoint) -> list[int]:
    """Original-ancestor index of each current layer."""
    cfg = ckpt.config
    dropped = set(cfg.pruned_from)
    return [i for i in range(cfg.original_n_layers) if i not in dropped]


def prune_layers(ckpt: Checkpoint, drop) -> Checkpoint:
    """Remove the listed blocks (current numbering); no healing."""
    cfg = ckpt.config
    drop = validate_selection(drop, cfg.n_layers)
    if len(drop) >= cfg.n_layers:
        raise ValueError("cannot prune every layer")
    if ckpt.adapter_layers:
        raise ValueError("merge adapters before pruning")
    drop_set = set(drop)
    survivors = [i for i in range(cfg.n_layers) if i not in drop_set]
    orig = _original_indices(ckpt)
    new_cfg = cfg.replace(
        n_layers=len(survivors),
        pruned_from=sorted(cfg.pruned_from + [orig[i] for i in drop]),
    )
    tensors = {n: a.copy() for n, a in ckpt.tensors.items()
               if not n.startswith("layers.")}
    for new_i, old_i in enumerate(survivors):
        for name in LAYER_TENSORS:
            tensors[f"layers.{new_i}.{name}"] = ckpt.tensors[f"layers.{old_i}.{name}"].copy()
    out = Checkpoint(new_cfg, tensors)
    out.validate()
    return out


def region_constrained_prune(ckpt: Checkpoint, region, k: int,
                             scores: ImportanceScores):
    """Drop the k lowest-scoring layers outside the region (single-shot
    ranking, no recomputation between drops). Returns (pruned, dropped)."""
    cfg = ckpt.config
    region = validate_selection(region, cfg.n_layers)
    if len(scores.scores) != cfg.n_layers:
        raise ValueError(f"scores cover {len(scores.scores)} layers, model has {cfg.n_layers}")
    n_outside = cfg.n_layers - len(region)
    if k > n_outside:
        raise ValueError(f"k={k} exceeds the {n_outside} layers outside the region")
    if k == 0:
        return ckpt.clone(), []
    dropped = top_k_by_score(scores, k, direction="lowest", exclude=region)
    overlap = set(dropped) & set(region)
    assert not overlap, f"pruning selected region layers {sorted(overlap)}"
    return prune_layers(ckpt, dropped), dropped


def unconstrained_prune(ckpt: Checkpoint, k: int, scores: ImportanceScores):
    """Baseline: region-free pruning of the k globally lowest-scoring layers."""
    if k >= ckpt.config.n_layers:
        raise ValueError(f"k={k} would drop every layer")
    return region_constrained_prune(ckpt, [], k, scores)
