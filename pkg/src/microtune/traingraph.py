"""Composed forward/backward over the full fusion pipeline.

One forward runs: encoder (image mode) or ingested tokens (feature mode)
-> attention-bypass tokens -> saliency selection (outside the gradient
path) -> query-guided attention pooling -> shared-space projection ->
cosine heads -> fused logits. The matching backward distributes the fused
logit gradient through every trainable tensor: LayerNorm affines (image
mode), the learnable classifier rows, the pooling projections, and the
empty token. Selection indices are held fixed, so the query mean is
differentiable over the selected rows only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    GradientBundle,
    attention_pool,
    attention_pool_backward,
    cosine_rows,
    cosine_rows_backward,
)
from .classifier import ClassifierBank
from .encoder import (
    EncoderWeights,
    PatchTokenGrid,
    bypass_attention_backward,
    bypass_attention_cached,
    encode_batch_cached,
    encoder_backward,
)
from .saliency import SaliencyPartition, build_affinity, ncut_bipartition, saliency_query
from .tokenfusion import fuse

__all__ = ["Pipeline", "FusionCache", "fusion_forward", "fusion_backward"]


@dataclass
class Pipeline:
    """Everything the fusion graph needs besides the per-batch inputs."""

    weights: EncoderWeights
    params: dict[str, np.ndarray]
    bank: ClassifierBank
    fusion_mode: str = "symmetric"
    affinity_mode: str | None = None
    affinity_tau: float = 0.2
    affinity_eps: float = 1e-5
    select_rule: str = "max_abs"
    detach_query: bool = False
    feature_mode: bool = False


@dataclass
class FusionCache:
    enc_cache: object
    bypass_cache: object
    pool_cache: object
    local_cache: object
    global_cache: object
    partitions: list[SaliencyPartition]
    attention: np.ndarray
    token_shape: tuple
    fusion_mode: str
    detach_query: bool
    feature_mode: bool


def _saliency_queries(v_patch: np.ndarray, pipe: Pipeline):
    partitions = []
    queries = np.empty((v_patch.shape[0], v_patch.shape[2]))
    mode = None if pipe.affinity_mode in (None, "auto") else pipe.affinity_mode
    for b in range(v_patch.shape[0]):
        graph = build_affinity(v_patch[b], mode, pipe.affinity_tau, pipe.affinity_eps)
        part = ncut_bipartition(graph, pipe.select_rule)
        partitions.append(part)
        queries[b] = saliency_query(part, v_patch[b])
    return queries, partitions


def fusion_forward(views, pipe: Pipeline, partitions: list[SaliencyPartition] | None = None):
    """Fused logits for a batch of views.

    ``views`` is a (B, H, W) raster stack in image mode or a list of
    :class:`PatchTokenGrid` in feature mode. Returns ``(fused (B, C),
    FusionCache)``. Passing ``partitions`` pins the saliency selection,
    matching the indices-fixed-per-forward semantics that the gradient
    checks rely on.
    """
    if pipe.feature_mode:
        grids: list[PatchTokenGrid] = views
        x_penult_patch = np.stack([g.x_patch_penult for g in grids])
        v_cls = np.stack([g.v_cls for g in grids])
        enc_cache = None
    else:
        _, x_penult, v_cls, enc_cache = encode_batch_cached(views, pipe.weights, pipe.params)
        x_penult_patch = x_penult[:, 1:, :]
    v_patch, bypass_cache = bypass_attention_cached(x_penult_patch, pipe.weights)
    if partitions is None:
        queries, partitions = _saliency_queries(v_patch, pipe)
    else:
        queries = np.stack([saliency_query(p, v_patch[b]) for b, p in enumerate(partitions)])
    pooled, pool_cache = attention_pool(
        queries,
        v_patch,
        pipe.params["pool.w_query"],
        pipe.params["pool.w_key"],
        pipe.params["pool.w_value"],
        pipe.params["pool.empty_token"],
    )
    fg_shared = pooled @ pipe.weights.p_clip
    cls_shared = v_cls @ pipe.weights.p_clip
    local, local_cache = cosine_rows(fg_shared, pipe.bank.learnable)
    global_, global_cache = cosine_rows(cls_shared, pipe.bank.learnable)
    fused = fuse(local, global_, pipe.fusion_mode)
    cache = FusionCache(
        enc_cache,
        bypass_cache,
        pool_cache,
        local_cache,
        global_cache,
        partitions,
        pool_cache[5],
        v_patch.shape,
        pipe.fusion_mode,
        pipe.detach_query,
        pipe.feature_mode,
    )
    return fused, cache


def fusion_backward(dfused: np.ndarray, cache: FusionCache, pipe: Pipeline) -> GradientBundle:
    """Gradient of a scalar loss through the fused logits into every
    trainable tensor; returns a finalized bundle with zeros for untouched
    parameters."""
    grads = GradientBundle()
    if cache.fusion_mode == "symmetric":
        dlocal, dglobal = dfused / 2.0, dfused / 2.0
    elif cache.fusion_mode == "global-only":
        dlocal, dglobal = np.zeros_like(dfused), dfused
    else:
        dlocal, dglobal = dfused, np.zeros_like(dfused)

    dfg_shared, dhead_local = cosine_rows_backward(dlocal, cache.local_cache)
    dcls_shared, dhead_global = cosine_rows_backward(dglobal, cache.global_cache)
    grads.accumulate("head.learnable", dhead_local + dhead_global)

    dpooled = dfg_shared @ pipe.weights.p_clip.T
    dv_cls = dcls_shared @ pipe.weights.p_clip.T

    dquery, dv_patch, pool_grads = attention_pool_backward(dpooled, cache.pool_cache)
    for key, g in pool_grads.items():
        grads.accumulate(f"pool.{key}", g)

    if not cache.detach_query:
        for b, part in enumerate(cache.partitions):
            sel = part.selected
            dv_patch[b, sel, :] += dquery[b] / sel.size

    if not cache.feature_mode:
        d_penult_patch = bypass_attention_backward(dv_patch, cache.bypass_cache)
        bsz, n_patch, d = cache.token_shape
        d_x_penult = np.zeros((bsz, n_patch + 1, d))
        d_x_penult[:, 1:, :] = d_penult_patch
        encoder_backward(None, d_x_penult, dv_cls, cache.enc_cache, grads)
    return grads.finalize(pipe.params)
