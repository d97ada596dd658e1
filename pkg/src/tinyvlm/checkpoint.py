"""Named-tensor checkpoints and their binary file format.

Layout (all integers little-endian):
  magic "TVLM" | u32 version=1 | u32 config-JSON length | config JSON (UTF-8)
  | u32 tensor count | per tensor:
      u16 name length | name (UTF-8) | u8 dtype code (1 = f64) | u8 rank
      | rank x u32 dims | row-major little-endian f64 payload

Weight convention: every rank-2 tensor is (out_features, in_features) and is
applied as y = x @ W.T, matching the canonical shapes below.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .core import gaussian_init, make_rng

MAGIC = b"TVLM"
VERSION = 1
DTYPE_F64 = 1

LAYER_TENSORS = ("ln1.g", "ln1.b", "wq", "wk", "wv", "wo",
                 "ln2.g", "ln2.b", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2")
ADAPTER_TARGETS = ("wq", "wk", "wv", "wo")


class CheckpointError(Exception):
    """Checkpoint format violation; ``code`` is a machine-readable tag."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def layer_tensor_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    D, F = cfg.d_model, cfg.d_ff
    return {
        "ln1.g": (D,), "ln1.b": (D,),
        "wq": (D, D), "wk": (D, D), "wv": (D, D), "wo": (D, D),
        "ln2.g": (D,), "ln2.b": (D,),
        "mlp.w1": (F, D), "mlp.b1": (F,), "mlp.w2": (D, F), "mlp.b2": (D,),
    }


def adapter_tensor_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    r, D = cfg.adapter_rank, cfg.d_model
    shapes = {}
    for w in ADAPTER_TARGETS:
        shapes[f"{w}.lora_a"] = (r, D)
        shapes[f"{w}.lora_b"] = (D, r)
    return shapes


def canonical_shapes(cfg: ModelConfig, adapter_layers=()) -> dict[str, tuple]:
    """Ordered name -> shape map for the full canonical tensor set."""
    D, C, V = cfg.d_model, cfg.patch_dim, cfg.vocab_size
    adapter_layers = set(adapter_layers)
    if adapter_layers and cfg.adapter_rank < 1:
        raise ValueError("adapter layers given but config.adapter_rank == 0")
    shapes: dict[str, tuple] = {"embed.tok": (V, D), "proj.w": (D, C), "proj.b": (D,)}
    per_layer = layer_tensor_shapes(cfg)
    per_adapter = adapter_tensor_shapes(cfg) if adapter_layers else {}
    for i in range(cfg.n_layers):
        for name, shape in per_layer.items():
            shapes[f"layers.{i}.{name}"] = shape
        if i in adapter_layers:
            for name, shape in per_adapter.items():
                shapes[f"layers.{i}.{name}"] = shape
    shapes["final_ln.g"] = (D,)
    shapes["final_ln.b"] = (D,)
    shapes["lm_head.w"] = (V, D)
    return shapes


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def adapter_layers(self) -> list[int]:
        return sorted(i for i in range(self.config.n_layers)
                      if f"layers.{i}.wq.lora_a" in self.tensors)

    def validate(self):
        try:
            expected = canonical_shapes(self.config, self.adapter_layers)
        except ValueError as exc:
            raise CheckpointError("bad_config", str(exc)) from exc
        missing = [n for n in expected if n not in self.tensors]
        if missing:
            raise CheckpointError("missing_tensor",
                                  f"checkpoint missing canonical tensor {missing[0]!r}")
        unknown = [n for n in self.tensors if n not in expected]
        if unknown:
            raise CheckpointError("unknown_tensor",
                                  f"unknown tensor name {unknown[0]!r}")
        for name, shape in expected.items():
            arr = self.tensors[name]
            if arr.shape != shape:
                raise CheckpointError(
                    "bad_shape", f"tensor {name!r} has shape {arr.shape}, expected {shape}")
            if arr.dtype != np.float64:
                raise CheckpointError("bad_dtype", f"tensor {name!r} must be float64")
            if not np.all(np.isfinite(arr)):
                raise CheckpointError("non_finite", f"tensor {name!r} contains NaN/Inf")

    def clone(self) -> "Checkpoint":
        return Checkpoint(self.config.replace(),
                          {n: a.copy() for n, a in self.tensors.items()})

    def equal_bits(self, other: "Checkpoint") -> bool:
        if self.config.to_json() != other.config.to_json():
            return False
        if set(self.tensors) != set(other.tensors):
            return False
        return all(np.array_equal(self.tensors[n], other.tensors[n])
                   for n in self.tensors)

    def layer_names(self, i: int, with_adapters: bool = False) -> list[str]:
        names = [f"layers.{i}.{t}" for t in LAYER_TENSORS]
        if with_adapters and i in self.adapter_layers:
            for w in ADAPTER_TARGETS:
                names += [f"layers.{i}.{w}.lora_a", f"layers.{i}.{w}.lora_b"]
        return names


def init_checkpoint(cfg: ModelConfig, seed: int, weight_std: float = 0.02) -> Checkpoint:
    """Fresh model: N(0, weight_std^2) weight matrices, zero biases, unit gains."""
    rng = make_rng(seed)
    tensors = {}
    for name, shape in canonical_shapes(cfg).items():
        if name.endswith(".g"):
            tensors[name] = np.ones(shape)
        elif len(shape) == 1:
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = gaussian_init(rng, shape, 0.0, weight_std)
    ckpt = Checkpoint(cfg, tensors)
    ckpt.validate()
    return ckpt


def effective_weight(ckpt: Checkpoint, layer: int, which: str) -> np.ndarray:
    """Attention projection with any low-rank adapter folded in on the fly.

    W_eff = W + (alpha/r) * lora_b @ lora_a with alpha = r, i.e. W + B @ A.
    """
    w = ckpt.tensors[f"layers.{layer}.{which}"]
    a_name = f"layers.{layer}.{which}.lora_a"
    if a_name in ckpt.tensors:
        a = ckpt.tensors[a_name]
        b = ckpt.tensors[f"layers.{layer}.{which}.lora_b"]
        return w + b @ a
    return w


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    ckpt.validate()
    order = list(canonical_shapes(ckpt.config, ckpt.adapter_layers))
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        cfg_bytes = ckpt.config.to_json().encode("utf-8")
        f.write(struct.pack("<I", len(cfg_bytes)))
        f.write(cfg_bytes)
        f.write(struct.pack("<I", len(order)))
        for name in order:
            arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f8")
            name_b = name.encode("utf-8")
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<BB", DTYPE_F64, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes(order="C"))


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated", f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MAGIC:
            raise CheckpointError("bad_magic", f"{path}: bad magic, not a TVLM checkpoint")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != VERSION:
            raise CheckpointError("bad_version",
                                  f"unsupported checkpoint version {version} (want {VERSION})")
        (cfg_len,) = struct.unpack("<I", _read_exact(f, 4, "config length"))
        cfg = ModelConfig.from_json(_read_exact(f, cfg_len, "config").decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "tensor name length"))
            name = _read_exact(f, name_len, "tensor name").decode("utf-8")
            dtype_code, rank = struct.unpack("<BB", _read_exact(f, 2, "tensor header"))
            if dtype_code != DTYPE_F64:
                raise CheckpointError("bad_dtype",
                                      f"tensor {name!r}: unsupported dtype code {dtype_code}")
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, f"dims of {name!r}"))
            n_bytes = 8 * int(np.prod(dims)) if rank else 8
            payload = _read_exact(f, n_bytes, f"payload of {name!r}")
            if name in tensors:
                raise CheckpointError("duplicate_tensor", f"tensor {name!r} appears twice")
            tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
        if f.read(1):
            raise CheckpointError("trailing_data", "trailing bytes after tensor table")
    ckpt = Checkpoint(cfg, tensors)
    ckpt.validate()
    return ckpt
