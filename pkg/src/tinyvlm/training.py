"""Deterministic training: backbone pretraining, projector pretraining and
selective-layer supervised fine-tuning (full or low-rank adapter mode).

Freezing is implemented as exclusion from the optimizer, never as gradient
zeroing: the backward pass still produces gradients for every tensor (they
must flow through frozen layers), but only tensors in ``trainable_set`` are
updated, so everything else stays bit-identical across a run.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .checkpoint import ADAPTER_TARGETS, Checkpoint, canonical_shapes
from .config import ModelConfig
from .core import gaussian_init, make_rng
from .data import TaskInstance, Vocabulary, assemble_batch
from .model import backward
from .selection import validate_selection

PHASES = ("backbone_pretrain", "projector_pretrain", "sft")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainPlan:
    phase: str
    steps: int
    batch_size: int
    seed: int
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    selection: list[int] = field(default_factory=list)  # sft only
    adapter_rank: int = 0                               # sft only; 0 = full fine-tuning

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}, want one of {PHASES}")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        self.betas = tuple(self.betas)
        self.selection = [int(i) for i in self.selection]
        if self.phase == "sft" and not self.selection:
            raise ValueError("sft requires a non-empty layer selection")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainPlan":
        return cls(**json.loads(text))


def trainable_set(cfg: ModelConfig, plan: TrainPlan) -> set[str]:
    """Canonical tensor names the optimizer may update under this plan.

    During SFT the embeddings, final layer norm and LM head stay frozen in
    every configuration (including "all layers") so that the layer
    selection is the only variable.
    """
    all_names = set(canonical_shapes(cfg))
    if plan.phase == "backbone_pretrain":
        return {n for n in all_names if not n.startswith("proj.")}
    if plan.phase == "projector_pretrain":
        return {"proj.w", "proj.b"}
    selection = validate_selection(plan.selection, cfg.n_layers, allow_empty=False)
    names = {"proj.w", "proj.b"}
    if plan.adapter_rank > 0:
        for i in selection:
            for w in ADAPTER_TARGETS:
                names.add(f"layers.{i}.{w}.lora_a")
                names.add(f"layers.{i}.{w}.lora_b")
    else:
        for i in selection:
            names.update(n for n in all_names if n.startswith(f"layers.{i}."))
    return names


def attach_adapters(ckpt: Checkpoint, selection, rank: int,
                    seed: int = 0) -> Checkpoint:
    """Add lora_a ~ N(0, 0.02^2), lora_b = 0 to wq/wk/wv/wo of the selected
    layers. Zero-initialised lora_b keeps the forward pass bit-identical."""
    if rank < 1:
        raise ValueError("adapter rank must be >= 1")
    selection = validate_selection(selection, ckpt.config.n_layers, allow_empty=False)
    already = set(ckpt.adapter_layers) & set(selection)
    if already:
        raise ValueError(f"adapters already attached on layers {sorted(already)}")
    if ckpt.config.adapter_rank not in (0, rank):
        raise ValueError(f"checkpoint already uses adapter rank {ckpt.config.adapter_rank}")
    rng = make_rng(seed)
    out = ckpt.clone()
    out.config = ckpt.config.replace(adapter_rank=rank)
    D = out.config.d_model
    for i in selection:
        for w in ADAPTER_TARGETS:
            out.tensors[f"layers.{i}.{w}.lora_a"] = gaussian_init(rng, (rank, D), 0.0, 0.02)
            out.tensors[f"layers.{i}.{w}.lora_b"] = np.zeros((D, rank))
    out.validate()
    return out


def merge_adapters(ckpt: Checkpoint) -> Checkpoint:
    """Fold W <- W + (alpha/r) * lora_b @ lora_a (alpha = r) and drop adapters."""
    layers = ckpt.adapter_layers
    if not layers:
        raise ValueError("no adapters to merge")
    out = ckpt.clone()
    for i in layers:
        for w in ADAPTER_TARGETS:
            a = out.tensors.pop(f"layers.{i}.{w}.lora_a")
            b = out.tensors.pop(f"layers.{i}.{w}.lora_b")
            out.tensors[f"layers.{i}.{w}"] = out.tensors[f"layers.{i}.{w}"] + b @ a
    out.config = out.config.replace(adapter_rank=0)
    out.validate()
    return out


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    loss_curve: list[tuple[int, float]]
    wall_seconds: float
    trainable: set[str]


def train(ckpt: Checkpoint, plan: TrainPlan, dataset: list[TaskInstance],
          vocab: Vocabulary) -> TrainResult:
    """AdamW over seed-determined batches; returns a new checkpoint.

    Tensors outside trainable_set(config, plan) are bit-identical between
    input and output. Divergence (non-finite loss) aborts with a diagnostic.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    names = trainable_set(ckpt.config, plan)
    out = ckpt.clone()
    missing = names - set(out.tensors)
    if missing:
        raise ValueError(f"plan trains {sorted(missing)[0]!r} but the checkpoint "
                         "lacks it (attach adapters first?)")

    order = [n for n in canonical_shapes(out.config, out.adapter_layers) if n in names]
    moments = {n: (np.zeros_like(out.tensors[n]), np.zeros_like(out.tensors[n]))
               for n in order}
    beta1, beta2 = plan.betas
    rng = make_rng(plan.seed)
    curve = []
    started = time.perf_counter()
    for step in range(plan.steps):
        idx = rng.integers(0, len(dataset), size=plan.batch_size)
        batch = assemble_batch([dataset[int(j)] for j in idx], vocab, out.config)
        loss, grads = backward(out, batch)
        if not np.isfinite(loss):
            raise TrainingDiverged(
                f"non-finite loss at step {step} (phase={plan.phase}, lr={plan.lr})")
        curve.append((step, loss))
        t = step + 1
        bc1 = 1.0 - beta1**t
        bc2 = 1.0 - beta2**t
        for n in order:
            g = grads[n]
            m, v = moments[n]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + plan.eps)
            if plan.weight_decay:
                update = update + plan.weight_decay * out.tensors[n]
            out.tensors[n] -= plan.lr * update
    wall = time.perf_counter() - started
    out.validate()
    return TrainResult(out, curve, wall, names)


def write_loss_curve(curve, path) -> None:
    with open(path, "w") as f:
        f.write("step,loss\n")
        for step, loss in curve:
            f.write(f"{step},{loss!r}\n")
