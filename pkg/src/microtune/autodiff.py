"""Closed-form reverse-mode gradients for the fixed training graph.

Every block exposes a forward returning ``(output, cache)`` and a backward
consuming the output gradient plus that cache. The training graph is static,
so the composition is written out by hand instead of recording a general
tape; each derivation is small enough to check against finite differences.

All tensors are float64 numpy arrays. Leading axes are batch axes; blocks
normalize or project over the last axis.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "GradientBundle",
    "stop_gradient",
    "layernorm",
    "layernorm_backward",
    "linear",
    "linear_backward",
    "gelu",
    "gelu_backward",
    "softmax",
    "softmax_backward",
    "self_attention",
    "self_attention_backward",
    "attention_pool",
    "attention_pool_backward",
    "cosine_rows",
    "cosine_rows_backward",
    "loss_head",
    "loss_head_backward",
    "numeric_directional",
    "relative_error",
]

LN_EPS = 1e-6
PROB_FLOOR = 1e-12


class GradientBundle:
    """Per-parameter gradients keyed by parameter name.

    Accumulates contributions from multiple paths; ``finalize`` checks every
    entry is finite and shaped like its parameter.
    """

    def __init__(self):
        self._grads: dict[str, np.ndarray] = {}

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        if name in self._grads:
            self._grads[name] += grad
        else:
            self._grads[name] = np.array(grad, dtype=np.float64, copy=True)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._grads[name]

    def __contains__(self, name: str) -> bool:
        return name in self._grads

    def names(self):
        return self._grads.keys()

    def finalize(self, params: dict[str, np.ndarray]) -> "GradientBundle":
        for name, g in self._grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {name}")
            if name in params and g.shape != params[name].shape:
                raise ValueError(f"gradient shape mismatch for {name}")
        # parameters untouched by the loss get explicit zeros
        for name, p in params.items():
            self._grads.setdefault(name, np.zeros_like(p))
        return self


def stop_gradient(t: np.ndarray) -> np.ndarray:
    """Identity on values; the static backward passes treat the result as a
    constant because no cache records it."""
    return np.array(t, dtype=np.float64, copy=True)


# --- elementwise / normalization blocks ------------------------------------


def layernorm(x, gamma, beta, eps=LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return gamma * xhat + beta, (xhat, inv, gamma)


def layernorm_backward(dy, cache):
    """Returns (dx, dgamma, dbeta); affine grads sum over leading axes."""
    xhat, inv, gamma = cache
    axes = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * gamma
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dgamma, dbeta


def linear(x, w, b=None):
    y = x @ w
    if b is not None:
        y = y + b
    return y, (x, w)


def linear_backward(dy, cache, want_param_grads=False):
    x, w = cache
    dx = dy @ w.T
    if not want_param_grads:
        return dx, None, None
    dw = np.tensordot(x, dy, axes=(tuple(range(x.ndim - 1)),) * 2)
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    return dx, dw, db


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_backward(dy, cache):
    x, t = cache
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def softmax(z):
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    return p, p


def softmax_backward(dp, p):
    return p * (dp - (dp * p).sum(axis=-1, keepdims=True))


# --- attention blocks -------------------------------------------------------


def self_attention(x, wq, bq, wk, bk, wv, bv, wo, bo):
    """Single-head self-attention over tokens; x is (..., n, d).

    The projection weights are frozen in this graph, so the backward only
    propagates to the activations.
    """
    d = x.shape[-1]
    q = x @ wq + bq
    k = x @ wk + bk
    v = x @ wv + bv
    scores = np.einsum("...id,...jd->...ij", q, k) / math.sqrt(d)
    attn, _ = softmax(scores)
    ctx = np.einsum("...ij,...jd->...id", attn, v)
    y = ctx @ wo + bo
    return y, (x, q, k, v, attn, wq, wk, wv, wo)


def self_attention_backward(dy, cache):
    x, q, k, v, attn, wq, wk, wv, wo = cache
    d = x.shape[-1]
    dctx = dy @ wo.T
    dattn = np.einsum("...id,...jd->...ij", dctx, v)
    dv = np.einsum("...ij,...id->...jd", attn, dctx)
    dscores = softmax_backward(dattn, attn) / math.sqrt(d)
    dq = np.einsum("...ij,...jd->...id", dscores, k)
    dk = np.einsum("...ij,...id->...jd", dscores, q)
    return dq @ wq.T + dk @ wk.T + dv @ wv.T


def attention_pool(query, tokens, w_query, w_key, w_value, empty_token):
    """Single-head attention pooling of ``tokens`` guided by ``query``.

    ``query`` is (B, d), ``tokens`` is (B, n, d); the trainable empty token
    is appended as key/value row n. Scores are scaled by sqrt of the token
    embedding dim. Returns the pooled (B, d) vector and the (B, n+1)
    attention weights inside the cache.
    """
    b, n, d = tokens.shape
    kv = np.concatenate([tokens, np.broadcast_to(empty_token, (b, 1, d))], axis=1)
    qp = query @ w_query
    kp = kv @ w_key
    vp = kv @ w_value
    logits = np.einsum("bd,bnd->bn", qp, kp) / math.sqrt(d)
    attn, _ = softmax(logits)
    pooled = np.einsum("bn,bnd->bd", attn, vp)
    cache = (query, kv, qp, kp, vp, attn, w_query, w_key, w_value, n)
    return pooled, cache


def attention_pool_backward(dpooled, cache):
    """Returns (dquery, dtokens, param_grads dict)."""
    query, kv, qp, kp, vp, attn, w_query, w_key, w_value, n = cache
    d = query.shape[-1]
    dvp = attn[..., None] * dpooled[:, None, :]
    dattn = np.einsum("bd,bnd->bn", dpooled, vp)
    dlogits = softmax_backward(dattn, attn) / math.sqrt(d)
    dqp = np.einsum("bn,bnd->bd", dlogits, kp)
    dkp = dlogits[..., None] * qp[:, None, :]
    dquery = dqp @ w_query.T
    dkv = dkp @ w_key.T + dvp @ w_value.T
    grads = {
        "w_query": query.T @ dqp,
        "w_key": np.einsum("bnd,bne->de", kv, dkp),
        "w_value": np.einsum("bnd,bne->de", kv, dvp),
        "empty_token": dkv[:, n, :].sum(axis=0),
    }
    return dquery, dkv[:, :n, :], grads


# --- similarity head and losses ---------------------------------------------


def cosine_rows(v, rows):
    """Cosine similarity of each batch vector against each classifier row.

    ``v`` is (B, d), ``rows`` is (C, d); both operands are treated as
    differentiable (full quotient-rule backward).
    """
    nv = np.linalg.norm(v, axis=-1, keepdims=True)
    nr = np.linalg.norm(rows, axis=-1)
    if np.any(nv == 0.0) or np.any(nr == 0.0):
        raise ValueError("degenerate embedding")
    dots = v @ rows.T
    sims = dots / (nv * nr)
    return sims, (v, rows, nv, nr, sims)


def cosine_rows_backward(dsims, cache):
    v, rows, nv, nr, sims = cache
    inv = dsims / (nv * nr)  # (B, C)
    dv = inv @ rows - ((dsims * sims).sum(axis=-1, keepdims=True) / nv**2) * v
    drows = inv.T @ v - ((dsims * sims).sum(axis=0) / nr**2)[:, None] * rows
    return dv, drows


def loss_head(logits, labels, temperature):
    """Pseudo-label cross-entropy plus batch fairness regularization.

    ``logits`` is (B, C); probabilities come from a temperature-scaled
    softmax. The self-training term is the mean negative log-probability of
    the assigned labels; the fairness term penalizes the batch-mean class
    distribution, ``-(1/C) * sum_k log(mean_b p[b, k])``. Probabilities are
    floored at 1e-12 inside the logs.
    """
    b, c = logits.shape
    p, _ = softmax(logits / temperature)
    picked = np.maximum(p[np.arange(b), labels], PROB_FLOOR)
    loss_st = float(-np.log(picked).mean())
    pbar = p.mean(axis=0)
    loss_reg = float(-np.log(np.maximum(pbar, PROB_FLOOR)).mean())
    return loss_st, loss_reg, (p, labels, pbar, temperature)


def loss_head_backward(cache, include_reg=True):
    """Gradient of ``loss_st (+ loss_reg)`` w.r.t. the fused logits."""
    p, labels, pbar, temperature = cache
    b, c = p.shape
    onehot = np.zeros_like(p)
    onehot[np.arange(b), labels] = 1.0
    dlogits = (p - onehot) / (b * temperature)
    if include_reg:
        dp = np.where(pbar > PROB_FLOOR, -1.0 / (c * b * pbar), 0.0)
        dp = np.broadcast_to(dp, p.shape)
        dlogits = dlogits + softmax_backward(dp, p) / temperature
    return dlogits


# --- finite-difference harness ----------------------------------------------


def numeric_directional(f, x, direction, h=1e-4):
    """Central finite difference of scalar ``f`` along ``direction`` at x."""
    return (f(x + h * direction) - f(x - h * direction)) / (2.0 * h)


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    scale = max(abs(analytic), abs(numeric), floor)
    return abs(analytic - numeric) / scale
