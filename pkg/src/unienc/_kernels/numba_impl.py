"""Numba-compiled kernels, twins of ``numpy_impl``."""
import math

import numpy as np
from numba import njit

NEG_BIG = -1e30
_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


@njit(cache=True)
def masked_softmax_fwd(scores, mask):
    n, t = scores.shape
    out = np.zeros((n, t))
    for i in range(n):
        m = -np.inf
        for j in range(t):
            if mask[i, j] and scores[i, j] > m:
                m = scores[i, j]
        s = 0.0
        for j in range(t):
            if mask[i, j]:
                e = math.exp(scores[i, j] - m)
                out[i, j] = e
                s += e
        for j in range(t):
            out[i, j] /= s
    return out


@njit(cache=True)
def masked_softmax_bwd(probs, grad):
    n, t = probs.shape
    out = np.empty((n, t))
    for i in range(n):
        d = 0.0
        for j in range(t):
            d += probs[i, j] * grad[i, j]
        for j in range(t):
            out[i, j] = probs[i, j] * (grad[i, j] - d)
    return out


@njit(cache=True)
def layernorm_fwd(x, gamma, beta, eps):
    n, d = x.shape
    y = np.empty((n, d))
    xhat = np.empty((n, d))
    rstd = np.empty(n)
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mu
            var += c * c
        var /= d
        r = 1.0 / math.sqrt(var + eps)
        rstd[i] = r
        for j in range(d):
            h = (x[i, j] - mu) * r
            xhat[i, j] = h
            y[i, j] = h * gamma[j] + beta[j]
    return y, xhat, rstd


@njit(cache=True)
def layernorm_bwd(dy, xhat, rstd, gamma):
    n, d = dy.shape
    dx = np.empty((n, d))
    dgamma = np.zeros(d)
    dbeta = np.zeros(d)
    for i in range(n):
        a = 0.0
        b = 0.0
        for j in range(d):
            g = dy[i, j] * gamma[j]
            a += g
            b += g * xhat[i, j]
            dgamma[j] += dy[i, j] * xhat[i, j]
            dbeta[j] += dy[i, j]
        a /= d
        b /= d
        for j in range(d):
            dx[i, j] = (dy[i, j] * gamma[j] - a - xhat[i, j] * b) * rstd[i]
    return dx, dgamma, dbeta


@njit(cache=True)
def _gelu_fwd_flat(x):
    out = np.empty_like(x)
    for i in range(x.size):
        v = x[i]
        out[i] = 0.5 * v * (1.0 + math.erf(v * _INV_SQRT2))
    return out


@njit(cache=True)
def _gelu_bwd_flat(x, grad):
    out = np.empty_like(x)
    for i in range(x.size):
        v = x[i]
        cdf = 0.5 * (1.0 + math.erf(v * _INV_SQRT2))
        pdf = _INV_SQRT2PI * math.exp(-0.5 * v * v)
        out[i] = grad[i] * (cdf + v * pdf)
    return out


def gelu_fwd(x):
    return _gelu_fwd_flat(np.ascontiguousarray(x).ravel()).reshape(x.shape)


def gelu_bwd(x, grad):
    flat = _gelu_bwd_flat(np.ascontiguousarray(x).ravel(),
                          np.ascontiguousarray(grad).ravel())
    return flat.reshape(x.shape)


@njit(cache=True)
def _scatter_add_rows(out, idx, src):
    for i in range(idx.shape[0]):
        r = idx[i]
        for j in range(src.shape[1]):
            out[r, j] += src[i, j]
    return out


def scatter_add_rows(out, idx, src):
    return _scatter_add_rows(out, np.ascontiguousarray(idx, dtype=np.int64),
                             np.ascontiguousarray(src))


@njit(cache=True)
def _region_mask(owner, rule, context_sees_candidates):
    t = owner.shape[0]
    out = np.zeros((t, t), dtype=np.bool_)
    for p in range(t):
        a = owner[p]
        for q in range(t):
            b = owner[q]
            if p == q:
                ok = True
            elif a == -2 or b == -2:
                ok = False
            elif rule == 2:
                ok = True
            elif a == b:
                ok = True
            elif rule == 0:
                ok = False
            elif a >= 0:
                ok = b == -1
            else:
                ok = context_sees_candidates
            out[p, q] = ok
    return out


def region_mask(owner, rule, context_sees_candidates):
    return _region_mask(np.ascontiguousarray(owner, dtype=np.int64), int(rule),
                        bool(context_sees_candidates))


@njit(cache=True)
def _count_true(mask):
    c = 0
    for v in mask.ravel():
        if v:
            c += 1
    return c


def count_true(mask):
    return int(_count_true(np.ascontiguousarray(mask)))
