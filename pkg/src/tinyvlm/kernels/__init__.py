"""Kernel backend selection.

The compiled Cython extension is preferred when importable; otherwise the
numpy fallback is used. TINYVLM_KERNELS=py|cy forces a backend (forcing
"cy" without the extension built is an error). The choice is made once at
import so a given environment always runs the same arithmetic.
"""

import os

from . import pyk

try:
    from . import cyk as _cyk
    HAVE_COMPILED = True
except ImportError:
    _cyk = None
    HAVE_COMPILED = False

_forced = os.environ.get("TINYVLM_KERNELS", "").strip().lower()
if _forced == "py":
    BACKEND = "py"
elif _forced == "cy":
    if not HAVE_COMPILED:
        raise ImportError("TINYVLM_KERNELS=cy but the compiled extension is not built")
    BACKEND = "cy"
elif _forced:
    raise ImportError(f"unknown TINYVLM_KERNELS value: {_forced!r}")
else:
    BACKEND = "cy" if HAVE_COMPILED else "py"

_impl = _cyk if BACKEND == "cy" else pyk

layernorm_fwd = _impl.layernorm_fwd
layernorm_bwd = _impl.layernorm_bwd
gelu_fwd = _impl.gelu_fwd
gelu_bwd = _impl.gelu_bwd
softmax_causal_fwd = _impl.softmax_causal_fwd
softmax_bwd = _impl.softmax_bwd

__all__ = [
    "BACKEND", "HAVE_COMPILED", "pyk",
    "layernorm_fwd", "layernorm_bwd", "gelu_fwd", "gelu_bwd",
    "softmax_causal_fwd", "softmax_bwd",
]
