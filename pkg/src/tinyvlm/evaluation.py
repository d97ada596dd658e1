"""Evaluation and accounting: task accuracy via greedy decoding, perplexity,
text-retention comparison and analytic compute-cost reports."""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from typing import Callable, Optional

import numpy as np

from .checkpoint import Checkpoint, canonical_shapes
from .config import ModelConfig
from .data import TaskInstance, Vocabulary, assemble_batch
from .model import MOD_PAD, MOD_TEXT, SequenceBatch, forward
from .training import TrainPlan, trainable_set

EVAL_BATCH = 64


@dataclass
class CostReport:
    trainable_param_count: int
    total_param_count: int
    weight_grad_flops_per_step: int
    optimizer_state_bytes: int
    wall_seconds: float = 0.0

    def __post_init__(self):
        if self.trainable_param_count > self.total_param_count:
            raise ValueError("trainable parameters exceed total parameters")


@dataclass
class EvalReport:
    model_id: str
    task_kind: str
    n_examples: int
    accuracy: float
    perplexity: float
    relative_to_full: Optional[float] = None
    cost: Optional[CostReport] = None

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")
        if self.perplexity < 1.0 - 1e-9:
            raise ValueError(f"perplexity {self.perplexity} below 1")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def greedy_decode(ckpt: Checkpoint, instances: list[TaskInstance],
                  vocab: Vocabulary) -> list[list[str]]:
    """Argmax-decode len(answer) tokens per instance (no sampling)."""
    if not instances:
        raise ValueError("empty dataset")
    cfg = ckpt.config
    out: list[list[str]] = []
    for lo in range(0, len(instances), EVAL_BATCH):
        chunk = instances[lo:lo + EVAL_BATCH]
        n_new = [len(inst.answer) for inst in chunk]
        prefix = assemble_batch(chunk, vocab, cfg, include_answer=False)
        cur = (prefix.modality_mask != MOD_PAD).sum(axis=1)
        T = int(max(c + n for c, n in zip(cur, n_new)))
        batch = assemble_batch(chunk, vocab, cfg, include_answer=False, pad_to=T)
        ids, mod = batch.token_ids, batch.modality_mask
        decoded = [[] for _ in chunk]
        for step in range(max(n_new)):
            logits, _ = forward(ckpt, SequenceBatch(ids, batch.patch_vectors, mod,
                                                    np.zeros_like(ids, dtype=bool)))
            for b in range(len(chunk)):
                if step >= n_new[b]:
                    continue
                tok = int(np.argmax(logits[b, cur[b] - 1]))
                # ids beyond the token enumeration are legal model outputs
                # (vocab_size may exceed the word list); they never match
                word = vocab.tokens[tok] if tok < len(vocab.tokens) else f"<unk{tok}>"
                decoded[b].append(word)
                ids[b, cur[b]] = tok
                mod[b, cur[b]] = MOD_TEXT
                cur[b] += 1
        out.extend(decoded)
    return out


def accuracy_from_decoder(decode_fn: Callable[[list[TaskInstance]], list[list[str]]],
                          dataset: list[TaskInstance]) -> float:
    """Exact match over the full answer span; decoder-agnostic core."""
    if not dataset:
        raise ValueError("accuracy over an empty dataset is undefined")
    decoded = decode_fn(dataset)
    hits = sum(1 for inst, got in zip(dataset, decoded) if got == inst.answer)
    return hits / len(dataset)


def accuracy(ckpt: Checkpoint, dataset: list[TaskInstance],
             vocab: Vocabulary) -> float:
    return accuracy_from_decoder(lambda d: greedy_decode(ckpt, d, vocab), dataset)


def _all_next_token_mask(batch: SequenceBatch) -> np.ndarray:
    mask = batch.modality_mask == MOD_TEXT
    mask[:, 0] = False
    return mask


def perplexity(ckpt: Checkpoint, dataset: list[TaskInstance], vocab: Vocabulary,
               span: str = "answer_only") -> float:
    """exp(mean NLL) over masked positions, pooled across the dataset.

    span="answer_only" scores answer tokens plus EOS; "all_next_token"
    scores every text token after BOS.
    """
    if span not in ("answer_only", "all_next_token"):
        raise ValueError(f"unknown span {span!r}")
    if not dataset:
        raise ValueError("perplexity over an empty dataset is undefined")
    total_nll = 0.0
    total_n = 0
    for lo in range(0, len(dataset), EVAL_BATCH):
        batch = assemble_batch(dataset[lo:lo + EVAL_BATCH], vocab, ckpt.config)
        if span == "all_next_token":
            batch.loss_mask = _all_next_token_mask(batch)
        logits, _ = forward(ckpt, batch)
        m = batch.loss_mask[:, 1:]
        rows, cols = np.nonzero(m)
        if rows.size == 0:
            raise ValueError("loss mask selects no positions")
        z = logits[rows, cols, :]
        tgt = batch.token_ids[rows, cols + 1]
        zmax = z.max(axis=1, keepdims=True)
        logp = (z - zmax) - np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
        total_nll += float(-logp[np.arange(rows.size), tgt].sum())
        total_n += rows.size
    return float(np.exp(total_nll / total_n))


def retention_report(backbone: Checkpoint, full_sft: Checkpoint,
                     selective_sft: Checkpoint, text_heldout: list[TaskInstance],
                     factqa: list[TaskInstance], vocab: Vocabulary) -> dict:
    """Text perplexity and fact-QA accuracy for backbone / full / selective,
    side by side (three rows, like the text-retention comparison table)."""
    rows = {}
    for label, ckpt in (("backbone", backbone), ("full_sft", full_sft),
                        ("selective_sft", selective_sft)):
        if ckpt.config.to_json() != backbone.config.to_json():
            raise ValueError(f"{label}: config differs from backbone")
        rows[label] = {
            "text_perplexity": perplexity(ckpt, text_heldout, vocab, "all_next_token"),
            "factqa_accuracy": accuracy(ckpt, factqa, vocab),
        }
    return rows


def cost_report(cfg: ModelConfig, plan: TrainPlan, seq_len: Optional[int] = None,
                wall_seconds: float = 0.0) -> CostReport:
    """Analytic cost accounting for one training plan.

    weight_grad_flops_per_step counts only the weight-gradient matmuls of
    trainable rank-2 tensors, 2 * B * T * rows * cols each (activation-
    gradient flops are selection-independent and excluded). Optimizer state
    is two f64 moments per trainable parameter.
    """
    T = seq_len if seq_len is not None else cfg.max_seq_len
    names = trainable_set(cfg, plan)
    shapes = dict(canonical_shapes(cfg))
    if plan.adapter_rank > 0:
        r, D = plan.adapter_rank, cfg.d_model
        for i in plan.selection:
            for w in ("wq", "wk", "wv", "wo"):
                shapes[f"layers.{i}.{w}.lora_a"] = (r, D)
                shapes[f"layers.{i}.{w}.lora_b"] = (D, r)
    trainable = sum(int(np.prod(shapes[n])) for n in names)
    total = sum(int(np.prod(s)) for s in shapes.values())
    flops = sum(2 * plan.batch_size * T * s[0] * s[1]
                for n in names if len(s := shapes[n]) == 2)
    return CostReport(trainable, total, flops, 2 * 8 * trainable, wall_seconds)


def relative_to_full(per_task_selective: dict[str, float],
                     per_task_full: dict[str, float]) -> float:
    """Per-task metric ratio selective/full, macro-averaged over tasks.

    Tasks where the full-tuning reference is 0 carry no signal and are
    skipped; the result is NaN only if every task is skipped.
    """
    ratios = [per_task_selective[task] / full_val
              for task, full_val in per_task_full.items() if full_val != 0]
    return float(np.mean(ratios)) if ratios else float("nan")
