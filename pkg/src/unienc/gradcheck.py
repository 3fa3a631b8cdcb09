"""Central finite differences against reverse-mode gradients."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

# Relative errors are taken against max(|analytic|, |numeric|, FLOOR) so a
# gradient that is zero analytically and ~1e-17 numerically does not read as 100% off.
FLOOR = 1e-8


def numeric_grad(loss_fn, p: Tensor, h: float = 1e-5) -> np.ndarray:
    out = np.zeros_like(p.data)
    flat = p.data.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        hi = loss_fn().data.item()
        flat[i] = old - h
        lo = loss_fn().data.item()
        flat[i] = old
        out.reshape(-1)[i] = (hi - lo) / (2.0 * h)
    return out


def relative_error(analytic, numeric, floor: float = FLOOR) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))


def check(loss_fn, params, h: float = 1e-5, floor: float = FLOOR) -> dict[str, float]:
    """Relative error per parameter. ``params`` maps names to leaf tensors
    with ``requires_grad``; ``loss_fn()`` must rebuild the graph each call."""
    params = dict(params)
    for p in params.values():
        p.grad = None
    T.backward(loss_fn())
    out = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        out[name] = relative_error(g, numeric_grad(loss_fn, p, h), floor)
    return out
