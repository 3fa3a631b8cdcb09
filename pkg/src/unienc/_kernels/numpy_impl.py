"""Pure-numpy reference kernels.

Every function here has a twin in ``numba_impl`` with the same signature.
Arrays are float64, C-contiguous, and 2-D unless noted.
"""
import numpy as np
from scipy.special import erf

NEG_BIG = -1e30
_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def masked_softmax_fwd(scores, mask):
    s = np.where(mask, scores, scores + NEG_BIG)
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    e[~mask] = 0.0
    return e / e.sum(axis=1, keepdims=True)


def masked_softmax_bwd(probs, grad):
    dot = (probs * grad).sum(axis=1, keepdims=True)
    return probs * (grad - dot)


def layernorm_fwd(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layernorm_bwd(dy, xhat, rstd, gamma):
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    g = dy * gamma
    dx = (g - g.mean(axis=1, keepdims=True)
          - xhat * (g * xhat).mean(axis=1, keepdims=True)) * rstd[:, None]
    return dx, dgamma, dbeta


def gelu_fwd(x):
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_bwd(x, grad):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return grad * (cdf + x * pdf)


def scatter_add_rows(out, idx, src):
    np.add.at(out, idx, src)
    return out


def region_mask(owner, rule, context_sees_candidates):
    """Boolean T x T attention map from a per-position owner code.

    owner: -1 context, i >= 0 candidate i, -2 padding.
    rule: 0 diagonal, 1 arrow, 2 square.
    """
    q = owner[:, None]
    k = owner[None, :]
    q_ctx, k_ctx = q == -1, k == -1
    q_pad, k_pad = q == -2, k == -2
    same = (q == k) & ~q_pad
    if rule == 0:
        allowed = same
    elif rule == 1:
        allowed = same | (~q_pad & ~q_ctx & k_ctx)
        if context_sees_candidates:
            allowed = allowed | (q_ctx & ~k_pad)
    else:
        allowed = ~q_pad & ~k_pad
    allowed = allowed.copy()
    np.fill_diagonal(allowed, True)
    return allowed


def count_true(mask):
    return int(np.count_nonzero(mask))
