"""Layer-importance metrics computed from activation traces and
checkpoint pairs.

Conventions, recorded in each result's provenance:
  - "hidden states of layer i" means the residual-stream INPUT to block i
    (the trace's final entry closes the list as block L-1's output);
  - cosine denominators are per-token vector norms;
  - activation angular distance averages arccos per token and then over
    tokens (set mean_of_arccos=False for arccos-of-mean-cosine instead);
  - arccos arguments are clamped to [-1, 1];
  - parameter metrics flatten each layer's tensors in canonical-name order
    and always take (backbone, fine-tuned) in that argument order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint, LAYER_TENSORS
from .core import make_rng
from .data import TaskInstance, Vocabulary, assemble_batch
from .model import ActivationTrace, MOD_IMAGE, MOD_PAD, MOD_TEXT, forward

METRIC_IDS = ("bi", "multimodal_bi", "param_change_ratio", "param_angular",
              "activation_angular", "image_attention")


@dataclass
class ImportanceScores:
    metric_id: str
    scores: np.ndarray
    provenance: dict

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not np.all(np.isfinite(self.scores)):
            raise ValueError(f"{self.metric_id}: non-finite score")


def _check_traces(traces: list[ActivationTrace]) -> int:
    if not traces:
        raise ValueError("no traces given")
    L = len(traces[0].residual_inputs) - 1
    for tr in traces:
        if len(tr.residual_inputs) - 1 != L:
            raise ValueError("traces disagree on layer count")
    return L


def _token_cosines(x_a: np.ndarray, x_b: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Per-token cosine between two (B, T, D) states at kept positions."""
    a = x_a[keep]
    b = x_b[keep]
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise ZeroDivisionError("zero-norm token state in trace")
    return np.einsum("nd,nd->n", a, b) / (na * nb)


def bi_score(traces: list[ActivationTrace]) -> ImportanceScores:
    """1 - mean per-token cosine between block input and output states."""
    L = _check_traces(traces)
    sums = np.zeros(L)
    count = 0
    for tr in traces:
        keep = tr.modality_mask != MOD_PAD
        count += int(keep.sum())
        for i in range(L):
            sums[i] += _token_cosines(tr.residual_inputs[i],
                                      tr.residual_inputs[i + 1], keep).sum()
    return ImportanceScores("bi", 1.0 - sums / count,
                            {"n_tokens": count, "n_traces": len(traces),
                             "states": "block_input", "norms": "per_token"})


def multimodal_bi_score(traces: list[ActivationTrace]) -> ImportanceScores:
    """BI averaged separately over image and text tokens, then combined;
    BOS counts as text and padding is excluded."""
    L = _check_traces(traces)
    sums = {MOD_IMAGE: np.zeros(L), MOD_TEXT: np.zeros(L)}
    counts = {MOD_IMAGE: 0, MOD_TEXT: 0}
    for tr in traces:
        for mod in (MOD_IMAGE, MOD_TEXT):
            keep = tr.modality_mask == mod
            counts[mod] += int(keep.sum())
            if not keep.any():
                continue
            for i in range(L):
                sums[mod][i] += _token_cosines(tr.residual_inputs[i],
                                               tr.residual_inputs[i + 1], keep).sum()
    if counts[MOD_IMAGE] == 0 or counts[MOD_TEXT] == 0:
        raise ValueError("multimodal BI needs at least one image and one text token")
    mean_img = sums[MOD_IMAGE] / counts[MOD_IMAGE]
    mean_txt = sums[MOD_TEXT] / counts[MOD_TEXT]
    return ImportanceScores("multimodal_bi", 1.0 - 0.5 * (mean_img + mean_txt),
                            {"n_image_tokens": counts[MOD_IMAGE],
                             "n_text_tokens": counts[MOD_TEXT],
                             "states": "block_input", "norms": "per_token"})


def _layer_vector(ckpt: Checkpoint, i: int) -> np.ndarray:
    from .checkpoint import effective_weight
    parts = []
    for name in LAYER_TENSORS:
        if name in ("wq", "wk", "wv", "wo"):
            parts.append(effective_weight(ckpt, i, name).ravel())
        else:
            parts.append(ckpt.tensors[f"layers.{i}.{name}"].ravel())
    return np.concatenate(parts)


def _check_pair(base: Checkpoint, tuned: Checkpoint) -> int:
    for f in ("n_layers", "d_model", "d_ff"):
        if getattr(base.config, f) != getattr(tuned.config, f):
            raise ValueError(f"checkpoints differ on {f}")
    return base.config.n_layers


def param_change_ratio(base: Checkpoint, tuned: Checkpoint,
                       skip_eps: float = 1e-12) -> ImportanceScores:
    """Mean elementwise |(theta' - theta) / theta| per layer; parameters with
    |theta| < skip_eps are skipped and the skip count reported. Adapters are
    folded into effective weights before comparison."""
    L = _check_pair(base, tuned)
    scores = np.empty(L)
    skipped = []
    for i in range(L):
        th = _layer_vector(base, i)
        th2 = _layer_vector(tuned, i)
        keep = np.abs(th) >= skip_eps
        skipped.append(int((~keep).sum()))
        if not keep.any():
            raise ValueError(f"layer {i}: every parameter below skip threshold")
        scores[i] = np.mean(np.abs((th2[keep] - th[keep]) / th[keep]))
    return ImportanceScores("param_change_ratio", scores,
                            {"skip_eps": skip_eps, "skipped_per_layer": skipped,
                             "order": "(backbone, fine-tuned)"})


def param_angular_distance(base: Checkpoint, tuned: Checkpoint) -> ImportanceScores:
    """arccos of the cosine between the flattened layer vectors, scaled by 1/pi."""
    L = _check_pair(base, tuned)
    scores = np.empty(L)
    for i in range(L):
        th = _layer_vector(base, i)
        th2 = _layer_vector(tuned, i)
        n1, n2 = np.linalg.norm(th), np.linalg.norm(th2)
        if n1 == 0.0 or n2 == 0.0:
            raise ZeroDivisionError(f"layer {i}: zero-norm parameter vector")
        c = np.clip(np.dot(th2, th) / (n1 * n2), -1.0, 1.0)
        scores[i] = np.arccos(c) / np.pi
    return ImportanceScores("param_angular", scores,
                            {"order": "(backbone, fine-tuned)",
                             "concat": "canonical-name order"})


def activation_angular_distance(traces: list[ActivationTrace], gap: int = 1,
                                mean_of_arccos: bool = True) -> ImportanceScores:
    """Mean over non-pad tokens of arccos(cos(x_i, x_{i+gap})) / pi.

    Scores cover i in 0..L-gap (length L for the default gap=1).
    """
    L = _check_traces(traces)
    if gap < 1 or gap > L:
        raise ValueError(f"need 1 <= gap <= {L}, got {gap}")
    n_out = L - gap + 1
    sums = np.zeros(n_out)
    count = 0
    for tr in traces:
        keep = tr.modality_mask != MOD_PAD
        count += int(keep.sum())
        for i in range(n_out):
            cos = np.clip(_token_cosines(tr.residual_inputs[i],
                                         tr.residual_inputs[i + gap], keep), -1.0, 1.0)
            if mean_of_arccos:
                sums[i] += np.sum(np.arccos(cos) / np.pi)
            else:
                sums[i] += cos.sum()
    if mean_of_arccos:
        scores = sums / count
    else:
        scores = np.arccos(np.clip(sums / count, -1.0, 1.0)) / np.pi
    return ImportanceScores("activation_angular", scores,
                            {"gap": gap, "reduction":
                             "mean_of_arccos" if mean_of_arccos else "arccos_of_mean"})


def image_attention_matrix(traces: list[ActivationTrace]) -> np.ndarray:
    """Per-instance image attention scores as an (instance, layer) matrix.

    For one instance, A_i sums attention mass received by image keys across
    heads and non-pad query positions, normalised by N_img * H. Each batch
    row of each trace is one instance.
    """
    L = _check_traces(traces)
    rows = []
    for tr in traces:
        B = tr.modality_mask.shape[0]
        for b in range(B):
            img_keys = tr.modality_mask[b] == MOD_IMAGE
            n_img = int(img_keys.sum())
            if n_img == 0:
                raise ValueError("instance without image tokens in image-attention trace")
            queries = tr.modality_mask[b] != MOD_PAD
            row = np.empty(L)
            for i in range(L):
                p = tr.attention_probs[i][b]     # (H, T, T)
                H = p.shape[0]
                row[i] = p[:, queries][:, :, img_keys].sum() / (n_img * H)
            rows.append(row)
    return np.asarray(rows)


def image_attention_score(traces: list[ActivationTrace]) -> ImportanceScores:
    matrix = image_attention_matrix(traces)
    return ImportanceScores("image_attention", matrix.mean(axis=0),
                            {"n_instances": matrix.shape[0],
                             "normalisation": "n_image_tokens * n_heads"})


def capture_traces(ckpt: Checkpoint, dataset: list[TaskInstance], vocab: Vocabulary,
                   n_samples: int = 50, seed: int = 0) -> list[ActivationTrace]:
    """Seed-determined sample of n_samples instances per task kind, traced
    one instance at a time (so traces carry no padding)."""
    if not dataset:
        raise ValueError("empty dataset")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    by_kind: dict[str, list[int]] = {}
    for j, inst in enumerate(dataset):
        by_kind.setdefault(inst.kind, []).append(j)
    rng = make_rng(seed)
    chosen: list[int] = []
    for kind in sorted(by_kind):
        pool = by_kind[kind]
        take = min(n_samples, len(pool))
        picks = rng.choice(len(pool), size=take, replace=False)
        chosen += [pool[int(p)] for p in np.sort(picks)]
    traces = []
    for j in chosen:
        batch = assemble_batch([dataset[j]], vocab, ckpt.config)
        _, trace = forward(ckpt, batch, capture=True)
        traces.append(trace)
    return traces


def scores_to_csv(scores: ImportanceScores, path) -> None:
    with open(path, "w") as f:
        f.write(f"# metric_id={scores.metric_id}\n")
        for key in sorted(scores.provenance):
            f.write(f"# {key}={scores.provenance[key]}\n")
        f.write("layer,score\n")
        for i, s in enumerate(scores.scores):
            f.write(f"{i},{float(s)!r}\n")


def heatmap_to_csv(matrix: np.ndarray, path) -> None:
    """Instance x layer score matrix for attention heat maps."""
    with open(path, "w") as f:
        f.write("instance," + ",".join(f"layer{i}" for i in range(matrix.shape[1])) + "\n")
        for j, row in enumerate(matrix):
            f.write(f"{j}," + ",".join(repr(float(v)) for v in row) + "\n")
