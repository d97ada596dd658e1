"""Toy vision-language model: linear patch projector feeding a pre-norm
decoder-only transformer with an untied LM head.

Fixed conventions (they make hand oracles and cross-module metrics
unambiguous):
  - sequence layout [BOS, img_1..img_P, prompt, answer, EOS, PAD...];
  - pre-norm blocks, layer-norm eps 1e-5, attention scale 1/sqrt(D/H),
    tanh-approximation GELU;
  - "layer i" means transformer block i; embeddings, projector, final
    layer norm and LM head are not layers;
  - the per-layer trace point is the residual-stream input to each block,
    with the final block's output closing the list (L+1 entries).

The backward pass is fully analytic and returns a gradient for every
canonical tensor (adapters included when present); callers decide which
tensors actually get updated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels as K
from .checkpoint import Checkpoint, canonical_shapes, effective_weight
from .config import ModelConfig

LN_EPS = 1e-5

MOD_PAD = 0
MOD_TEXT = 1
MOD_IMAGE = 2


@dataclass
class SequenceBatch:
    token_ids: np.ndarray      # (B, T) int64
    patch_vectors: np.ndarray  # (B, P, C) f64; zeros for rows without an image
    modality_mask: np.ndarray  # (B, T) int8 in {MOD_PAD, MOD_TEXT, MOD_IMAGE}
    loss_mask: np.ndarray      # (B, T) bool; True = this token is a target

    @property
    def batch_size(self) -> int:
        return self.token_ids.shape[0]

    @property
    def seq_len(self) -> int:
        return self.token_ids.shape[1]

    def validate(self, cfg: ModelConfig):
        B, T = self.token_ids.shape
        if T > cfg.max_seq_len:
            raise ValueError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
        if self.modality_mask.shape != (B, T) or self.loss_mask.shape != (B, T):
            raise ValueError("modality_mask/loss_mask shape mismatch with token_ids")
        if self.patch_vectors.shape != (B, cfg.n_patches, cfg.patch_dim):
            raise ValueError(
                f"patch_vectors shape {self.patch_vectors.shape} != "
                f"{(B, cfg.n_patches, cfg.patch_dim)}")
        if self.token_ids.min() < 0 or self.token_ids.max() >= cfg.vocab_size:
            raise ValueError("token id out of vocabulary range")
        if np.any(self.loss_mask & (self.modality_mask == MOD_PAD)):
            raise ValueError("loss_mask selects a pad position")
        if np.any(self.loss_mask[:, 0]):
            raise ValueError("position 0 (BOS) cannot be a loss target")
        img = self.modality_mask == MOD_IMAGE
        for b in range(B):
            pos = np.nonzero(img[b])[0]
            if pos.size and not np.array_equal(pos, np.arange(1, cfg.n_patches + 1)):
                raise ValueError(
                    f"row {b}: image positions must be exactly 1..{cfg.n_patches}")


@dataclass
class ActivationTrace:
    residual_inputs: list[np.ndarray]  # L+1 arrays of (B, T, D)
    attention_probs: list[np.ndarray]  # L arrays of (B, H, T, T)
    modality_mask: np.ndarray          # (B, T) int8


def _split_heads(x2d: np.ndarray, B: int, T: int, H: int, d: int) -> np.ndarray:
    return x2d.reshape(B, T, H, d).transpose(0, 2, 1, 3)


def _merge_heads(xh: np.ndarray, B: int, T: int, D: int) -> np.ndarray:
    return np.ascontiguousarray(xh.transpose(0, 2, 1, 3)).reshape(B * T, D)


def _embed(ckpt: Checkpoint, batch: SequenceBatch) -> np.ndarray:
    """Token embeddings for text/pad positions, projected patches for image
    positions. Rows without an image never touch the projector weights."""
    t = ckpt.tensors
    x = t["embed.tok"][batch.token_ids].copy()  # (B, T, D)
    img_rows = np.nonzero((batch.modality_mask == MOD_IMAGE).any(axis=1))[0]
    if img_rows.size:
        P = ckpt.config.n_patches
        proj = batch.patch_vectors[img_rows] @ t["proj.w"].T + t["proj.b"]
        x[img_rows, 1:P + 1, :] = proj
    return x


def _run(ckpt: Checkpoint, batch: SequenceBatch, capture: bool, need_cache: bool):
    cfg = ckpt.config
    batch.validate(cfg)
    B, T = batch.token_ids.shape
    D, H, d = cfg.d_model, cfg.n_heads, cfg.head_dim
    scale = 1.0 / np.sqrt(d)
    key_ok = np.ascontiguousarray(batch.modality_mask != MOD_PAD, dtype=np.uint8)

    x = _embed(ckpt, batch)
    residuals = [x] if (capture or need_cache) else None
    attn_probs = [] if (capture or need_cache) else None
    cache = [] if need_cache else None

    t = ckpt.tensors
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        wq = effective_weight(ckpt, i, "wq")
        wk = effective_weight(ckpt, i, "wk")
        wv = effective_weight(ckpt, i, "wv")
        wo = effective_weight(ckpt, i, "wo")

        x2d = x.reshape(B * T, D)
        a2d, mu1, r1 = K.layernorm_fwd(x2d, t[pre + "ln1.g"], t[pre + "ln1.b"], LN_EPS)
        qh = _split_heads(a2d @ wq.T, B, T, H, d)
        kh = _split_heads(a2d @ wk.T, B, T, H, d)
        vh = _split_heads(a2d @ wv.T, B, T, H, d)
        scores = np.ascontiguousarray(qh @ kh.transpose(0, 1, 3, 2)) * scale
        probs = K.softmax_causal_fwd(scores, key_ok)
        ctx2d = _merge_heads(probs @ vh, B, T, D)
        x2 = x + (ctx2d @ wo.T).reshape(B, T, D)

        x2_2d = x2.reshape(B * T, D)
        b2d, mu2, r2 = K.layernorm_fwd(x2_2d, t[pre + "ln2.g"], t[pre + "ln2.b"], LN_EPS)
        h1 = b2d @ t[pre + "mlp.w1"].T + t[pre + "mlp.b1"]
        h2 = K.gelu_fwd(h1.ravel()).reshape(h1.shape)
        x3 = x2 + (h2 @ t[pre + "mlp.w2"].T + t[pre + "mlp.b2"]).reshape(B, T, D)

        if attn_probs is not None:
            attn_probs.append(probs)
        if residuals is not None:
            residuals.append(x3)
        if need_cache:
            cache.append(dict(x2d=x2d, a2d=a2d, mu1=mu1, r1=r1, qh=qh, kh=kh, vh=vh,
                              probs=probs, ctx2d=ctx2d, x2_2d=x2_2d, b2d=b2d,
                              mu2=mu2, r2=r2, h1=h1, h2=h2,
                              wq=wq, wk=wk, wv=wv, wo=wo))
        x = x3

    xL2d = x.reshape(B * T, D)
    xf2d, muf, rf = K.layernorm_fwd(xL2d, t["final_ln.g"], t["final_ln.b"], LN_EPS)
    logits = (xf2d @ t["lm_head.w"].T).reshape(B, T, cfg.vocab_size)
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logits in forward pass")

    trace = None
    if capture:
        trace = ActivationTrace(residuals, attn_probs, batch.modality_mask.copy())
    final = dict(xL2d=xL2d, xf2d=xf2d, muf=muf, rf=rf) if need_cache else None
    return logits, trace, cache, final


def forward(ckpt: Checkpoint, batch: SequenceBatch,
            capture: bool = False) -> tuple[np.ndarray, Optional[ActivationTrace]]:
    logits, trace, _, _ = _run(ckpt, batch, capture, need_cache=False)
    return logits, trace


def _ce_loss_and_dlogits(logits: np.ndarray, batch: SequenceBatch, want_grad: bool):
    """Mean next-token cross entropy over loss-masked target positions.

    A True at loss_mask[b, t] means token_ids[b, t] is predicted from
    logits[b, t-1].
    """
    B, T, V = logits.shape
    m = batch.loss_mask[:, 1:]
    n = int(m.sum())
    if n == 0:
        raise ValueError("loss_mask selects no positions")
    rows, cols = np.nonzero(m)          # cols index logits positions 0..T-2
    z = logits[rows, cols, :]
    tgt = batch.token_ids[rows, cols + 1]
    zmax = z.max(axis=1, keepdims=True)
    zs = z - zmax
    logsumexp = np.log(np.exp(zs).sum(axis=1, keepdims=True))
    logp = zs - logsumexp
    loss = float(-logp[np.arange(n), tgt].mean())
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    if not want_grad:
        return loss, None
    soft = np.exp(logp)
    soft[np.arange(n), tgt] -= 1.0
    dlogits = np.zeros_like(logits)
    dlogits[rows, cols, :] = soft / n
    return loss, dlogits


def loss_only(ckpt: Checkpoint, batch: SequenceBatch) -> float:
    logits, _ = forward(ckpt, batch)
    loss, _ = _ce_loss_and_dlogits(logits, batch, want_grad=False)
    return loss


def backward(ckpt: Checkpoint, batch: SequenceBatch) -> tuple[float, dict[str, np.ndarray]]:
    """Loss plus analytic gradients for every canonical tensor."""
    cfg = ckpt.config
    logits, _, cache, final = _run(ckpt, batch, capture=False, need_cache=True)
    loss, dlogits = _ce_loss_and_dlogits(logits, batch, want_grad=True)

    B, T = batch.token_ids.shape
    D, H, d = cfg.d_model, cfg.n_heads, cfg.head_dim
    scale = 1.0 / np.sqrt(d)
    t = ckpt.tensors
    grads = {name: np.zeros(shape)
             for name, shape in canonical_shapes(cfg, ckpt.adapter_layers).items()}

    dlog2d = dlogits.reshape(B * T, cfg.vocab_size)
    grads["lm_head.w"] = dlog2d.T @ final["xf2d"]
    dxf = dlog2d @ t["lm_head.w"]
    dx2d, dgf, dbf = K.layernorm_bwd(final["xL2d"], t["final_ln.g"],
                                     final["muf"], final["rf"], dxf)
    grads["final_ln.g"] = dgf
    grads["final_ln.b"] = dbf
    dx = dx2d.reshape(B, T, D)

    for i in reversed(range(cfg.n_layers)):
        pre = f"layers.{i}."
        c = cache[i]

        # MLP branch: x3 = x2 + (gelu(ln2(x2) @ W1.T + b1) @ W2.T + b2)
        dm2d = dx.reshape(B * T, D)
        grads[pre + "mlp.w2"] = dm2d.T @ c["h2"]
        grads[pre + "mlp.b2"] = dm2d.sum(axis=0)
        dh2 = dm2d @ t[pre + "mlp.w2"]
        dh1 = K.gelu_bwd(c["h1"].ravel(), np.ascontiguousarray(dh2.ravel())).reshape(dh2.shape)
        grads[pre + "mlp.w1"] = dh1.T @ c["b2d"]
        grads[pre + "mlp.b1"] = dh1.sum(axis=0)
        db2d = dh1 @ t[pre + "mlp.w1"]
        dx2_ln, dg2, dbeta2 = K.layernorm_bwd(c["x2_2d"], t[pre + "ln2.g"],
                                              c["mu2"], c["r2"], db2d)
        grads[pre + "ln2.g"] = dg2
        grads[pre + "ln2.b"] = dbeta2
        dx2 = dx + dx2_ln.reshape(B, T, D)

        # attention branch: x2 = x + (merge(probs @ v) @ Wo.T)
        do2d = dx2.reshape(B * T, D)
        dwo_eff = do2d.T @ c["ctx2d"]
        dctx = _split_heads(do2d @ c["wo"], B, T, H, d)
        dprobs = np.ascontiguousarray(dctx @ c["vh"].transpose(0, 1, 3, 2))
        dvh = c["probs"].transpose(0, 1, 3, 2) @ dctx
        dscores = K.softmax_bwd(c["probs"], dprobs)
        dqh = (dscores @ c["kh"]) * scale
        dkh = (dscores.transpose(0, 1, 3, 2) @ c["qh"]) * scale
        dq2d = _merge_heads(dqh, B, T, D)
        dk2d = _merge_heads(dkh, B, T, D)
        dv2d = _merge_heads(dvh, B, T, D)
        dwq_eff = dq2d.T @ c["a2d"]
        dwk_eff = dk2d.T @ c["a2d"]
        dwv_eff = dv2d.T @ c["a2d"]
        da2d = dq2d @ c["wq"] + dk2d @ c["wk"] + dv2d @ c["wv"]
        dx_ln, dg1, dbeta1 = K.layernorm_bwd(c["x2d"], t[pre + "ln1.g"],
                                             c["mu1"], c["r1"], da2d)
        grads[pre + "ln1.g"] = dg1
        grads[pre + "ln1.b"] = dbeta1

        for which, dw_eff in (("wq", dwq_eff), ("wk", dwk_eff),
                              ("wv", dwv_eff), ("wo", dwo_eff)):
            grads[pre + which] = dw_eff
            a_name = pre + which + ".lora_a"
            if a_name in t:
                grads[a_name] = t[pre + which + ".lora_b"].T @ dw_eff
                grads[pre + which + ".lora_b"] = dw_eff @ t[a_name].T

        dx = dx2 + dx_ln.reshape(B, T, D)

    # embedding / projector
    img = batch.modality_mask == MOD_IMAGE
    nonimg = ~img
    ids_flat = batch.token_ids[nonimg]
    np.add.at(grads["embed.tok"], ids_flat, dx[nonimg])
    img_rows = np.nonzero(img.any(axis=1))[0]
    if img_rows.size:
        P = cfg.n_patches
        d_emb_img = dx[img_rows, 1:P + 1, :]            # (B', P, D)
        patches = batch.patch_vectors[img_rows]          # (B', P, C)
        grads["proj.w"] = np.einsum("bpd,bpc->dc", d_emb_img, patches)
        grads["proj.b"] = d_emb_img.sum(axis=(0, 1))

    return loss, grads
