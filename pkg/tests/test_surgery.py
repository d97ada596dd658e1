import numpy as np
import pytest

from tinyvlm.checkpoint import (Checkpoint, LAYER_TENSORS, canonical_shapes,
                                init_checkpoint, load_checkpoint, save_checkpoint)
from tinyvlm.config import ModelConfig
from tinyvlm.core import make_rng
from tinyvlm.data import Vocabulary, assemble_batch, gen_visual_sft, random_fact_map
from tinyvlm.metrics import ImportanceScores, activation_angular_distance, capture_traces
from tinyvlm.model import forward
from tinyvlm.surgery import (prune_layers, region_constrained_prune, revert_layers,
                             unconstrained_prune)

VOCAB = Vocabulary(3)


def cfg(n_layers=4, **kw):
    base = dict(n_layers=n_layers, d_model=16, n_heads=2, d_ff=32, vocab_size=64,
                n_patches=9, patch_dim=10, max_seq_len=34)
    base.update(kw)
    return ModelConfig(**base)


def batch_for(c, n=6, seed=0):
    rng = make_rng(seed)
    fm = random_fact_map(rng)
    insts = gen_visual_sft(rng, n, {"perception_color": 1.0}, fm)
    return assemble_batch(insts, VOCAB, c)


def scores_for(values):
    return ImportanceScores("activation_angular", np.asarray(values, dtype=float), {})


def test_revert_empty_and_all():
    c = cfg()
    backbone = init_checkpoint(c, 1, 0.05)
    tuned = init_checkpoint(c, 2, 0.05)
    assert revert_layers(tuned, backbone, []).equal_bits(tuned)
    full = revert_layers(tuned, backbone, range(c.n_layers))
    for i in range(c.n_layers):
        for t in LAYER_TENSORS:
            assert np.array_equal(full.tensors[f"layers.{i}.{t}"],
                                  backbone.tensors[f"layers.{i}.{t}"])
    assert np.array_equal(full.tensors["embed.tok"], tuned.tensors["embed.tok"])


def test_revert_config_mismatch():
    a = init_checkpoint(cfg(4), 1, 0.05)
    b = init_checkpoint(cfg(3), 1, 0.05)
    with pytest.raises(ValueError):
        revert_layers(a, b, [0])


def test_revert_partial():
    c = cfg()
    backbone = init_checkpoint(c, 3, 0.05)
    tuned = init_checkpoint(c, 4, 0.05)
    out = revert_layers(tuned, backbone, [1, 3])
    assert np.array_equal(out.tensors["layers.1.wq"], backbone.tensors["layers.1.wq"])
    assert np.array_equal(out.tensors["layers.2.wq"], tuned.tensors["layers.2.wq"])


def test_prune_noop_and_renumbering():
    c = cfg(3)
    ckpt = init_checkpoint(c, 5, 0.05)
    assert prune_layers(ckpt, []).equal_bits(ckpt)
    pruned = prune_layers(ckpt, [1])
    assert pruned.config.n_layers == 2
    assert pruned.config.pruned_from == [1]
    for t in LAYER_TENSORS:
        assert np.array_equal(pruned.tensors[f"layers.0.{t}"], ckpt.tensors[f"layers.0.{t}"])
        assert np.array_equal(pruned.tensors[f"layers.1.{t}"], ckpt.tensors[f"layers.2.{t}"])
    with pytest.raises(ValueError):
        prune_layers(ckpt, [0, 1, 2])


def test_prune_provenance_tracks_original_indices():
    ckpt = init_checkpoint(cfg(6), 6, 0.05)
    once = prune_layers(ckpt, [1, 4])         # originals 1, 4 dropped
    assert once.config.pruned_from == [1, 4]
    # survivors are originals [0, 2, 3, 5]; dropping current 2 drops original 3
    twice = prune_layers(once, [2])
    assert twice.config.pruned_from == [1, 3, 4]
    assert twice.config.original_n_layers == 6
    for t in LAYER_TENSORS:
        assert np.array_equal(twice.tensors[f"layers.2.{t}"], ckpt.tensors[f"layers.5.{t}"])


def test_prune_matches_stitched_reference_forward():
    c = cfg(4)
    ckpt = init_checkpoint(c, 7, 0.08)
    pruned = prune_layers(ckpt, [1, 2])
    # manually stitched reference model
    ref_cfg = c.replace(n_layers=2, pruned_from=[1, 2])
    tensors = {n: a.copy() for n, a in ckpt.tensors.items() if not n.startswith("layers.")}
    for new_i, old_i in enumerate((0, 3)):
        for t in LAYER_TENSORS:
            tensors[f"layers.{new_i}.{t}"] = ckpt.tensors[f"layers.{old_i}.{t}"].copy()
    ref = Checkpoint(ref_cfg, tensors)
    ref.validate()
    batch = batch_for(c)
    a, _ = forward(pruned, batch)
    b, _ = forward(ref, batch)
    assert np.abs(a - b).max() < 1e-12


def test_identity_block_prunes_cleanly():
    """wo and mlp.w2 zeroed (biases are zero at init) makes the block a
    residual pass-through; dropping it must not change logits."""
    c = cfg(3)
    ckpt = init_checkpoint(c, 8, 0.08)
    ckpt.tensors["layers.1.wo"][:] = 0.0
    ckpt.tensors["layers.1.mlp.w2"][:] = 0.0
    batch = batch_for(c)
    full, _ = forward(ckpt, batch)
    pruned, _ = forward(prune_layers(ckpt, [1]), batch)
    assert np.abs(full - pruned).max() < 1e-9


def test_unconstrained_prune_drops_identity_block_first():
    c = cfg(3)
    ckpt = init_checkpoint(c, 9, 0.08)
    ckpt.tensors["layers.1.wo"][:] = 0.0
    ckpt.tensors["layers.1.mlp.w2"][:] = 0.0
    rng = make_rng(10)
    fm = random_fact_map(rng)
    dataset = gen_visual_sft(rng, 10, {"perception_color": 1.0}, fm)
    traces = capture_traces(ckpt, dataset, VOCAB, n_samples=5, seed=0)
    scores = activation_angular_distance(traces)
    assert scores.scores[1] < 1e-7  # identity block barely moves the stream
    pruned, dropped = unconstrained_prune(ckpt, 1, scores)
    assert dropped == [1]
    assert pruned.config.n_layers == 2


def test_region_constrained_examples():
    ckpt = init_checkpoint(cfg(8), 11, 0.05)
    scores = scores_for([.9, .8, .7, .1, .6, .2, .5, .95])
    pruned, dropped = region_constrained_prune(ckpt, [0, 7], 2, scores)
    assert dropped == [3, 5]
    assert pruned.config.n_layers == 6

    same, dropped0 = region_constrained_prune(ckpt, [0, 7], 0, scores)
    assert dropped0 == [] and same.equal_bits(ckpt)

    with pytest.raises(ValueError):
        region_constrained_prune(ckpt, list(range(8)), 1, scores)
    with pytest.raises(ValueError):
        region_constrained_prune(ckpt, [0, 7], 7, scores)


def test_region_never_dropped_randomized():
    rng = make_rng(12)
    base = {L: init_checkpoint(cfg(L, d_model=8, d_ff=8), L, 0.05) for L in (4, 6, 8)}
    for _ in range(200):
        L = int(rng.choice([4, 6, 8]))
        region = sorted(rng.choice(L, size=int(rng.integers(1, L - 1)), replace=False).tolist())
        k = int(rng.integers(0, L - len(region) + 1))
        if k >= L - len(region) + 1 or L - len(region) - k < 1 and k == L - len(region):
            k = max(0, L - len(region) - 1)
        scores = scores_for(rng.random(L))
        if k >= L:  # prune_layers still needs a survivor
            continue
        pruned, dropped = region_constrained_prune(base[L], region, k, scores)
        assert len(dropped) == k
        assert not set(dropped) & set(region)
        assert pruned.config.n_layers == L - k


def test_pruned_checkpoint_roundtrip(tmp_path):
    ckpt = init_checkpoint(cfg(5), 13, 0.05)
    pruned = prune_layers(ckpt, [0, 2])
    save_checkpoint(pruned, tmp_path / "p.ckpt")
    back = load_checkpoint(tmp_path / "p.ckpt")
    assert back.equal_bits(pruned)
    assert back.config.pruned_from == [0, 2]
