"""Kernel dispatch.

Hot row-wise loops (masked softmax, layer norm, GELU, row scatter-add, mask
construction) come in two flavours: numba ``@njit`` and plain numpy. Numba is
used when importable unless ``UNIENC_DISABLE_NUMBA`` is set to a truthy value.
"""
import os

from . import numpy_impl

_disabled = os.environ.get("UNIENC_DISABLE_NUMBA", "").lower() in ("1", "true", "yes")

if _disabled:
    _impl = numpy_impl
    BACKEND = "numpy"
else:
    try:
        from . import numba_impl as _impl
        BACKEND = "numba"
    except ImportError:  # pragma: no cover
        _impl = numpy_impl
        BACKEND = "numpy"

masked_softmax_fwd = _impl.masked_softmax_fwd
masked_softmax_bwd = _impl.masked_softmax_bwd
layernorm_fwd = _impl.layernorm_fwd
layernorm_bwd = _impl.layernorm_bwd
gelu_fwd = _impl.gelu_fwd
gelu_bwd = _impl.gelu_bwd
scatter_add_rows = _impl.scatter_add_rows
region_mask = _impl.region_mask
count_true = _impl.count_true

__all__ = [
    "BACKEND", "masked_softmax_fwd", "masked_softmax_bwd", "layernorm_fwd",
    "layernorm_bwd", "gelu_fwd", "gelu_bwd", "scatter_add_rows", "region_mask",
    "count_true",
]
