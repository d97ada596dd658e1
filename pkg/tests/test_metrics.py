import math

import numpy as np
import pytest

from tinyvlm.checkpoint import LAYER_TENSORS, init_checkpoint
from tinyvlm.config import ModelConfig
from tinyvlm.core import make_rng
from tinyvlm.data import Vocabulary, gen_caption_data, gen_visual_sft, random_fact_map
from tinyvlm.metrics import (ImportanceScores, activation_angular_distance, bi_score,
                             capture_traces, image_attention_matrix,
                             image_attention_score, multimodal_bi_score,
                             param_angular_distance, param_change_ratio)
from tinyvlm.model import ActivationTrace, MOD_IMAGE, MOD_PAD, MOD_TEXT


# --- naive scalar-loop oracles (independent of the package implementations) --

def _cos(u, v):
    du = math.sqrt(sum(x * x for x in u))
    dv = math.sqrt(sum(x * x for x in v))
    return sum(a * b for a, b in zip(u, v)) / (du * dv)


def naive_bi(traces):
    L = len(traces[0].residual_inputs) - 1
    out = []
    for i in range(L):
        vals = []
        for tr in traces:
            B, T = tr.modality_mask.shape
            for b in range(B):
                for t in range(T):
                    if tr.modality_mask[b, t] != MOD_PAD:
                        vals.append(_cos(tr.residual_inputs[i][b, t].tolist(),
                                         tr.residual_inputs[i + 1][b, t].tolist()))
        out.append(1.0 - sum(vals) / len(vals))
    return out


def naive_multimodal_bi(traces):
    L = len(traces[0].residual_inputs) - 1
    out = []
    for i in range(L):
        per_mod = {MOD_IMAGE: [], MOD_TEXT: []}
        for tr in traces:
            B, T = tr.modality_mask.shape
            for b in range(B):
                for t in range(T):
                    m = tr.modality_mask[b, t]
                    if m in per_mod:
                        per_mod[m].append(_cos(tr.residual_inputs[i][b, t].tolist(),
                                               tr.residual_inputs[i + 1][b, t].tolist()))
        out.append(1.0 - 0.5 * (sum(per_mod[MOD_IMAGE]) / len(per_mod[MOD_IMAGE])
                                + sum(per_mod[MOD_TEXT]) / len(per_mod[MOD_TEXT])))
    return out


def naive_activation_angular(traces, gap=1):
    L = len(traces[0].residual_inputs) - 1
    out = []
    for i in range(L - gap + 1):
        vals = []
        for tr in traces:
            B, T = tr.modality_mask.shape
            for b in range(B):
                for t in range(T):
                    if tr.modality_mask[b, t] != MOD_PAD:
                        c = _cos(tr.residual_inputs[i][b, t].tolist(),
                                 tr.residual_inputs[i + gap][b, t].tolist())
                        vals.append(math.acos(max(-1.0, min(1.0, c))) / math.pi)
        out.append(sum(vals) / len(vals))
    return out


def naive_param_change(base, tuned, skip_eps=1e-12):
    out = []
    for i in range(base.config.n_layers):
        vals = []
        for name in LAYER_TENSORS:
            th = base.tensors[f"layers.{i}.{name}"].ravel().tolist()
            th2 = tuned.tensors[f"layers.{i}.{name}"].ravel().tolist()
            for a, b in zip(th, th2):
                if abs(a) >= skip_eps:
                    vals.append(abs((b - a) / a))
        out.append(sum(vals) / len(vals))
    return out


def naive_param_angular(base, tuned):
    out = []
    for i in range(base.config.n_layers):
        th, th2 = [], []
        for name in LAYER_TENSORS:
            th += base.tensors[f"layers.{i}.{name}"].ravel().tolist()
            th2 += tuned.tensors[f"layers.{i}.{name}"].ravel().tolist()
        c = sum(a * b for a, b in zip(th, th2)) / (
            math.sqrt(sum(a * a for a in th)) * math.sqrt(sum(b * b for b in th2)))
        out.append(math.acos(max(-1.0, min(1.0, c))) / math.pi)
    return out


def naive_image_attention(traces):
    L = len(traces[0].attention_probs)
    rows = []
    for tr in traces:
        B, T = tr.modality_mask.shape
        for b in range(B):
            img = [t for t in range(T) if tr.modality_mask[b, t] == MOD_IMAGE]
            qs = [t for t in range(T) if tr.modality_mask[b, t] != MOD_PAD]
            row = []
            for i in range(L):
                p = tr.attention_probs[i][b]
                H = p.shape[0]
                total = sum(p[h, j, t] for h in range(H) for j in qs for t in img)
                row.append(total / (len(img) * H))
            rows.append(row)
    return rows


# --- synthetic traces ---------------------------------------------------------

def random_trace(rng, L=3, B=2, T=6, D=5, H=2, n_img=2, n_pad=1):
    mod = np.full((B, T), MOD_TEXT, dtype=np.int8)
    mod[:, 1:1 + n_img] = MOD_IMAGE
    if n_pad:
        mod[:, T - n_pad:] = MOD_PAD
    residuals = [rng.normal(size=(B, T, D)) for _ in range(L + 1)]
    probs = []
    for _ in range(L):
        raw = rng.random(size=(B, H, T, T))
        keep = np.tril(np.ones((T, T)))[None, None] * (mod != MOD_PAD)[:, None, None, :]
        raw = raw * keep
        probs.append(raw / raw.sum(axis=-1, keepdims=True))
    return ActivationTrace(residuals, probs, mod)


def test_bi_matches_naive_oracle():
    rng = make_rng(0)
    traces = [random_trace(rng), random_trace(rng, B=1, T=5)]
    got = bi_score(traces)
    assert got.metric_id == "bi"
    assert np.abs(got.scores - np.array(naive_bi(traces))).max() < 1e-12


def test_bi_extremes():
    mod = np.full((1, 4), MOD_TEXT, dtype=np.int8)
    x = make_rng(1).normal(size=(1, 4, 5))
    same = ActivationTrace([x, x.copy(), x.copy()], [], mod)
    assert np.abs(bi_score([same]).scores).max() < 1e-12
    anti = ActivationTrace([x, -x, x.copy()], [], mod)
    s = bi_score([anti]).scores
    assert abs(s[0] - 2.0) < 1e-12 and abs(s[1] - 2.0) < 1e-12


def test_bi_zero_norm_state_raises():
    mod = np.full((1, 2), MOD_TEXT, dtype=np.int8)
    x0 = np.zeros((1, 2, 3))
    x1 = np.ones((1, 2, 3))
    with pytest.raises(ZeroDivisionError):
        bi_score([ActivationTrace([x0, x1], [], mod)])


def test_multimodal_bi_matches_naive_and_formula():
    rng = make_rng(2)
    traces = [random_trace(rng), random_trace(rng, B=1, T=6, n_img=3)]
    got = multimodal_bi_score(traces)
    assert np.abs(got.scores - np.array(naive_multimodal_bi(traces))).max() < 1e-12

    # image tokens unchanged, text tokens negated -> 1 - (1 + (-1))/2 = 1
    mod = np.full((1, 4), MOD_TEXT, dtype=np.int8)
    mod[0, 1:3] = MOD_IMAGE
    x = make_rng(3).normal(size=(1, 4, 5))
    x2 = x.copy()
    x2[0, 0] *= -1
    x2[0, 3] *= -1
    tr = ActivationTrace([x, x2], [], mod)
    assert abs(multimodal_bi_score([tr]).scores[0] - 1.0) < 1e-12
    # all unchanged -> 0
    assert abs(multimodal_bi_score([ActivationTrace([x, x.copy()], [], mod)]).scores[0]) < 1e-12


def test_multimodal_bi_equals_bi_on_balanced_trace():
    """Equal image/text counts with identical per-token states."""
    mod = np.full((1, 4), MOD_TEXT, dtype=np.int8)
    mod[0, 1:3] = MOD_IMAGE
    x = make_rng(4).normal(size=(1, 4, 5))
    x2 = make_rng(5).normal(size=(1, 4, 5))
    tr = ActivationTrace([x, x2], [], mod)
    assert abs(multimodal_bi_score([tr]).scores[0] - bi_score([tr]).scores[0]) < 1e-12


def test_multimodal_bi_needs_both_modalities():
    mod = np.full((1, 4), MOD_TEXT, dtype=np.int8)
    x = make_rng(6).normal(size=(1, 4, 5))
    with pytest.raises(ValueError):
        multimodal_bi_score([ActivationTrace([x, x.copy()], [], mod)])


def _ckpt_pair(seed=0):
    cfg = ModelConfig(n_layers=1, d_model=4, n_heads=2, d_ff=4, vocab_size=6,
                      n_patches=1, patch_dim=2, max_seq_len=8)
    base = init_checkpoint(cfg, seed=seed, weight_std=0.2)
    rng = make_rng(seed + 50)
    tuned = base.clone()
    for name in tuned.tensors:
        tuned.tensors[name] = tuned.tensors[name] + rng.normal(
            0, 0.05, size=tuned.tensors[name].shape)
    return base, tuned


def test_param_change_ratio_matches_naive():
    base, tuned = _ckpt_pair(1)
    got = param_change_ratio(base, tuned)
    want = naive_param_change(base, tuned)
    assert np.abs(got.scores - np.array(want)).max() < 1e-12
    assert got.provenance["skipped_per_layer"][0] > 0  # zero-init biases are skipped


def test_param_change_ratio_extremes():
    base, _ = _ckpt_pair(2)
    assert np.abs(param_change_ratio(base, base.clone()).scores).max() == 0.0
    doubled = base.clone()
    for name in doubled.tensors:
        doubled.tensors[name] = doubled.tensors[name] * 2.0
    assert np.abs(param_change_ratio(base, doubled).scores - 1.0).max() < 1e-12


def test_param_angular_matches_naive_and_extremes():
    base, tuned = _ckpt_pair(3)
    got = param_angular_distance(base, tuned)
    assert np.abs(got.scores - np.array(naive_param_angular(base, tuned))).max() < 1e-12
    # arccos has unbounded slope at +-1, so identity/antipodal extremes are
    # only representable to ~sqrt(eps); 1e-7 is the honest bound here.
    assert np.abs(param_angular_distance(base, base.clone()).scores).max() < 1e-7
    negated = base.clone()
    for i in range(base.config.n_layers):
        for name in LAYER_TENSORS:
            negated.tensors[f"layers.{i}.{name}"] = -negated.tensors[f"layers.{i}.{name}"]
    assert np.abs(param_angular_distance(base, negated).scores - 1.0).max() < 1e-7


def test_param_angular_orthogonal_is_half():
    base, _ = _ckpt_pair(4)
    ortho = base.clone()
    v = np.concatenate([base.tensors[f"layers.0.{n}"].ravel() for n in LAYER_TENSORS])
    rng = make_rng(60)
    w = rng.normal(size=v.size)
    w -= (w @ v) / (v @ v) * v  # exact Gram-Schmidt
    off = 0
    for name in LAYER_TENSORS:
        size = base.tensors[f"layers.0.{name}"].size
        ortho.tensors[f"layers.0.{name}"] = w[off:off + size].reshape(
            base.tensors[f"layers.0.{name}"].shape)
        off += size
    assert abs(param_angular_distance(base, ortho).scores[0] - 0.5) < 1e-12


def test_activation_angular_matches_naive_and_extremes():
    rng = make_rng(7)
    traces = [random_trace(rng, L=3), random_trace(rng, L=3, B=1, T=4)]
    got = activation_angular_distance(traces)
    assert len(got.scores) == 3
    assert np.abs(got.scores - np.array(naive_activation_angular(traces))).max() < 1e-12
    got2 = activation_angular_distance(traces, gap=2)
    assert len(got2.scores) == 2
    assert np.abs(got2.scores - np.array(naive_activation_angular(traces, 2))).max() < 1e-12

    mod = np.full((1, 3), MOD_TEXT, dtype=np.int8)
    x = make_rng(8).normal(size=(1, 3, 4))
    same = ActivationTrace([x, x.copy()], [], mod)
    assert np.abs(activation_angular_distance([same]).scores).max() < 1e-7
    anti = ActivationTrace([x, -x], [], mod)
    assert abs(activation_angular_distance([anti]).scores[0] - 1.0) < 1e-7


def test_activation_angular_alt_reduction():
    rng = make_rng(9)
    traces = [random_trace(rng)]
    a = activation_angular_distance(traces, mean_of_arccos=True)
    b = activation_angular_distance(traces, mean_of_arccos=False)
    assert a.provenance["reduction"] == "mean_of_arccos"
    assert b.provenance["reduction"] == "arccos_of_mean"
    assert not np.allclose(a.scores, b.scores)  # genuinely different estimators


def test_bi_and_angular_agree_at_extremes():
    mod = np.full((1, 3), MOD_TEXT, dtype=np.int8)
    x = make_rng(10).normal(size=(1, 3, 4))
    same = ActivationTrace([x, x.copy()], [], mod)
    anti = ActivationTrace([x, -x], [], mod)
    assert bi_score([same]).scores[0] < 1e-12 and \
        activation_angular_distance([same]).scores[0] < 1e-7
    assert abs(bi_score([anti]).scores[0] - 2.0) < 1e-12 and \
        abs(activation_angular_distance([anti]).scores[0] - 1.0) < 1e-7


def test_metrics_invariant_to_batch_order_and_padding():
    rng = make_rng(11)
    t1 = random_trace(rng, n_pad=0)
    t2 = random_trace(rng, B=1, T=5, n_pad=0)

    def pad_trace(tr, extra):
        B, T = tr.modality_mask.shape
        mod = np.concatenate([tr.modality_mask,
                              np.full((B, extra), MOD_PAD, dtype=np.int8)], axis=1)
        res = [np.concatenate([x, np.ones((B, extra, x.shape[2]))], axis=1)
               for x in tr.residual_inputs]
        return ActivationTrace(res, [], mod)

    for metric in (bi_score, multimodal_bi_score, activation_angular_distance):
        a = metric([t1, t2]).scores
        b = metric([t2, t1]).scores
        c = metric([pad_trace(t1, 3), pad_trace(t2, 2)]).scores
        assert np.abs(a - b).max() < 1e-12
        assert np.abs(a - c).max() < 1e-12


def test_image_attention_uniform_is_one():
    # single head, no causal restriction, uniform attention over T keys
    B, H, T = 1, 1, 5
    mod = np.full((B, T), MOD_TEXT, dtype=np.int8)
    mod[0, 1:3] = MOD_IMAGE
    probs = np.full((B, H, T, T), 1.0 / T)
    x = np.ones((B, T, 3))
    tr = ActivationTrace([x, x], [probs], mod)
    assert abs(image_attention_score([tr]).scores[0] - 1.0) < 1e-12


def test_image_attention_all_mass_on_one_token():
    B, H, T = 1, 1, 6
    mod = np.full((B, T), MOD_TEXT, dtype=np.int8)
    mod[0, 2] = MOD_IMAGE
    probs = np.zeros((B, H, T, T))
    probs[0, 0, :, 2] = 1.0
    x = np.ones((B, T, 3))
    tr = ActivationTrace([x, x], [probs], mod)
    assert abs(image_attention_score([tr]).scores[0] - T / 1) < 1e-12


def test_image_attention_causal_toy_matches_hand_sum():
    """5-token causal toy with a hand-built probability tensor."""
    B, H, T = 1, 2, 5
    mod = np.asarray([[MOD_TEXT, MOD_IMAGE, MOD_IMAGE, MOD_TEXT, MOD_TEXT]], dtype=np.int8)
    rng = make_rng(12)
    probs = np.zeros((B, H, T, T))
    for h in range(H):
        for t in range(T):
            row = rng.random(t + 1)
            probs[0, h, t, :t + 1] = row / row.sum()
    x = np.ones((B, T, 3))
    tr = ActivationTrace([x, x], [probs], mod)
    got = image_attention_score([tr]).scores[0]
    want = naive_image_attention([tr])[0][0]
    assert abs(got - want) < 1e-12
    # hand expansion: sum over image keys {1, 2}, all heads/queries, / (2*2)
    hand = sum(probs[0, h, j, t] for h in range(2) for j in range(5) for t in (1, 2)) / 4.0
    assert abs(got - hand) < 1e-12


def test_image_attention_requires_image():
    mod = np.full((1, 3), MOD_TEXT, dtype=np.int8)
    probs = np.full((1, 1, 3, 3), 1 / 3)
    tr = ActivationTrace([np.ones((1, 3, 2))] * 2, [probs], mod)
    with pytest.raises(ValueError):
        image_attention_score([tr])


def test_capture_traces_shapes_and_determinism():
    cfg = ModelConfig(n_layers=2, d_model=8, n_heads=2, d_ff=8, vocab_size=64,
                      n_patches=9, patch_dim=10, max_seq_len=34)
    ckpt = init_checkpoint(cfg, seed=0, weight_std=0.05)
    vocab = Vocabulary(3)
    rng = make_rng(13)
    fm = random_fact_map(rng)
    dataset = (gen_visual_sft(rng, 30, {"perception_color": 0.5, "perception_count": 0.5}, fm)
               + gen_caption_data(rng, 10))
    traces = capture_traces(ckpt, dataset, vocab, n_samples=4, seed=5)
    assert len(traces) == 12  # 3 kinds x 4 samples
    for tr in traces:
        assert len(tr.residual_inputs) == cfg.n_layers + 1
        assert tr.residual_inputs[0].shape[0] == 1
        assert (tr.modality_mask != MOD_PAD).all()  # per-instance traces carry no pads
    again = capture_traces(ckpt, dataset, vocab, n_samples=4, seed=5)
    for a, b in zip(traces, again):
        assert np.array_equal(a.residual_inputs[-1], b.residual_inputs[-1])
    matrix = image_attention_matrix(traces)
    assert matrix.shape == (12, 2)
    with pytest.raises(ValueError):
        capture_traces(ckpt, [], vocab)


def test_capture_traces_default_sample_count():
    """Default sampling is 50 instances per task kind: 4 kinds -> 200 traces."""
    cfg = ModelConfig(n_layers=1, d_model=8, n_heads=2, d_ff=8, vocab_size=64,
                      n_patches=4, patch_dim=10, max_seq_len=34)
    ckpt = init_checkpoint(cfg, seed=0, weight_std=0.05)
    vocab = Vocabulary(2)
    rng = make_rng(14)
    fm = random_fact_map(rng)
    mix = {"perception_color": 1 / 3, "perception_count": 1 / 3,
           "cognition_meaning": 1 / 3}
    dataset = (gen_visual_sft(rng, 240, mix, fm, grid_size=2)
               + gen_caption_data(rng, 80, grid_size=2))
    traces = capture_traces(ckpt, dataset, vocab, seed=1)
    assert len(traces) == 200


def test_importance_scores_reject_non_finite():
    with pytest.raises(ValueError):
        ImportanceScores("bi", np.array([1.0, float("nan")]), {})
