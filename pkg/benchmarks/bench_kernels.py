"""Benchmark the compiled kernel backend against the numpy fallback.

Times each kernel on training-shaped inputs plus a full forward/backward
step under both backends. Run as: python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from tinyvlm import kernels
from tinyvlm.kernels import pyk
from tinyvlm.checkpoint import init_checkpoint
from tinyvlm.config import ModelConfig
from tinyvlm.experiments import LabParams, generate_lab_data
from tinyvlm.data import assemble_batch
from tinyvlm.model import backward


def timeit(fn, repeat=200):
    fn()  # warm up
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat


def bench_kernels():
    if not kernels.HAVE_COMPILED:
        print("compiled extension not built; nothing to compare")
        return
    from tinyvlm.kernels import cyk

    rng = np.random.default_rng(0)
    B, H, T, D, F = 16, 4, 32, 64, 256
    x = rng.normal(size=(B * T, D))
    g = rng.normal(size=D)
    b = rng.normal(size=D)
    dy = rng.normal(size=(B * T, D))
    _, mu, rs = pyk.layernorm_fwd(x, g, b, 1e-5)
    h = rng.normal(size=B * T * F)
    scores = rng.normal(size=(B, H, T, T))
    key_ok = np.ones((B, T), dtype=np.uint8)
    key_ok[:, 28:] = 0
    probs = pyk.softmax_causal_fwd(scores, key_ok)
    dprobs = rng.normal(size=scores.shape)

    cases = [
        ("layernorm_fwd", lambda k: k.layernorm_fwd(x, g, b, 1e-5)),
        ("layernorm_bwd", lambda k: k.layernorm_bwd(x, g, mu, rs, dy)),
        ("gelu_fwd", lambda k: k.gelu_fwd(h)),
        ("gelu_bwd", lambda k: k.gelu_bwd(h, h)),
        ("softmax_causal_fwd", lambda k: k.softmax_causal_fwd(scores, key_ok)),
        ("softmax_bwd", lambda k: k.softmax_bwd(probs, dprobs)),
    ]
    print(f"{'kernel':<22}{'numpy (us)':>12}{'compiled (us)':>15}{'speedup':>9}")
    for name, fn in cases:
        t_py = timeit(lambda: fn(pyk))
        t_cy = timeit(lambda: fn(cyk))
        print(f"{name:<22}{t_py * 1e6:>12.1f}{t_cy * 1e6:>15.1f}{t_py / t_cy:>9.2f}x")


def bench_train_step():
    params = LabParams()
    data = generate_lab_data(0, params)
    ckpt = init_checkpoint(params.model, 1, 0.02)
    batch = assemble_batch(data.sft_train[:16], data.vocab, params.model)

    arms = [("numpy", pyk)]
    if kernels.HAVE_COMPILED:
        from tinyvlm.kernels import cyk
        arms.append(("compiled", cyk))
    names = ("layernorm_fwd", "layernorm_bwd", "gelu_fwd", "gelu_bwd",
             "softmax_causal_fwd", "softmax_bwd")
    saved = {n: getattr(kernels, n) for n in names}
    results = {}
    try:
        for label, impl in arms:
            for n in names:
                setattr(kernels, n, getattr(impl, n))
            results[label] = timeit(lambda: backward(ckpt, batch), repeat=30)
    finally:
        for n, fn in saved.items():
            setattr(kernels, n, fn)
    print(f"\nfull forward+backward step (B=16, SFT batch):")
    for label, t in results.items():
        print(f"  {label:<10}{t * 1e3:8.1f} ms")
    if len(results) == 2:
        print(f"  speedup   {results['numpy'] / results['compiled']:8.2f}x")


if __name__ == "__main__":
    print(f"active backend: {kernels.BACKEND}")
    bench_kernels()
    bench_train_step()
