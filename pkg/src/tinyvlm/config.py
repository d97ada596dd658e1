"""Model hyperparameters shared by checkpoints, training and evaluation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict


@dataclass
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab_size: int
    n_patches: int
    patch_dim: int
    max_seq_len: int
    adapter_rank: int = 0               # 0 = no low-rank adapters
    pruned_from: list[int] = field(default_factory=list)  # dropped original layer indices

    def __post_init__(self):
        self.pruned_from = sorted(int(i) for i in self.pruned_from)
        self.validate()

    def validate(self):
        if self.n_layers < 1:
            raise ValueError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"n_heads {self.n_heads} must divide d_model {self.d_model}")
        for name in ("d_model", "n_heads", "d_ff", "vocab_size", "n_patches",
                     "patch_dim", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.adapter_rank < 0:
            raise ValueError("adapter_rank must be >= 0")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def original_n_layers(self) -> int:
        """Layer count of the unpruned ancestor model."""
        return self.n_layers + len(self.pruned_from)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))

    def replace(self, **kw) -> "ModelConfig":
        d = asdict(self)
        d.update(kw)
        return ModelConfig(**d)
