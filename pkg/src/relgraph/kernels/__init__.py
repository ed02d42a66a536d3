"""Convolution kernel backend selection.

The compiled extension is loaded when available (BACKEND == "fast") and
used for small channel counts, where it beats the numpy fallback; larger
convolutions go through numpy, whose shifted-slice formulation runs on
BLAS matrix multiplies and wins above roughly 8x8 channels (see
`benchmarks/bench_kernels.py` for the measurement).  Set RELGRAPH_PURE=1
to force the pure-numpy fallback everywhere.
"""

import os

from . import pure

# use the compiled loops only when C_in * C_out is at or below this
# (measured crossover vs the BLAS-backed fallback)
COMPILED_MAX_CHANNELS = 64

if os.environ.get("RELGRAPH_PURE"):
    _fast_impl = None
    BACKEND = "pure"
else:
    try:
        from . import _fast as _fast_impl  # type: ignore[no-redef]
        BACKEND = "fast"
    except ImportError:
        _fast_impl = None
        BACKEND = "pure"


def _pick(w):
    if _fast_impl is not None and w.shape[1] * w.shape[2] <= COMPILED_MAX_CHANNELS:
        return _fast_impl
    return pure


def conv1d_forward(x, w, bias, direction):
    return _pick(w).conv1d_forward(x, w, bias, direction)


def conv1d_backward(x, w, g, direction):
    return _pick(w).conv1d_backward(x, w, g, direction)


__all__ = ["conv1d_forward", "conv1d_backward", "BACKEND", "pure",
           "COMPILED_MAX_CHANNELS"]
