"""Saliency-guided attention pooling and coarse-fine logit fusion.

The saliency query attends over the patch tokens (plus a trainable empty
token acting as an attention sink) through single-head query/key/value
projections, producing one fine-grained token per image. Local logits are
the cosine similarities of its shared-space projection against the learnable
classifier rows; global logits do the same for the CLS token. The fused
output is their elementwise average, with global-only / local-only switches
for ablation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import attention_pool, cosine_rows
from .classifier import ClassifierBank
from .encoder import EncoderWeights, project_shared

__all__ = [
    "PoolingParams",
    "FusedLogits",
    "FUSION_MODES",
    "init_pooling_params",
    "soap_pool",
    "soap_pool_batch",
    "fused_logits",
    "fuse",
    "attention_weights",
]

FUSION_MODES = ("symmetric", "global-only", "local-only")


@dataclass
class PoolingParams:
    w_query: np.ndarray
    w_key: np.ndarray
    w_value: np.ndarray
    empty_token: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "pool.w_query": self.w_query,
            "pool.w_key": self.w_key,
            "pool.w_value": self.w_value,
            "pool.empty_token": self.empty_token,
        }


@dataclass
class FusedLogits:
    local: np.ndarray
    global_: np.ndarray
    fused: np.ndarray


def init_pooling_params(dim: int, seed: int) -> PoolingParams:
    """Near-identity projections plus a zero empty token.

    Identity-dominated init keeps the initial pooled token in the span of
    the patch tokens; the zero empty token starts as a neutral sink.
    """
    rng = np.random.default_rng(seed)
    eye = np.eye(dim)
    noise = 0.02 / np.sqrt(dim)
    return PoolingParams(
        w_query=eye + noise * rng.standard_normal((dim, dim)),
        w_key=eye + noise * rng.standard_normal((dim, dim)),
        w_value=eye + noise * rng.standard_normal((dim, dim)),
        empty_token=np.zeros(dim),
    )


def soap_pool_batch(query: np.ndarray, v_patch: np.ndarray, params: PoolingParams):
    """Batched pooling; returns (pooled (B, d), attention (B, n+1), cache)."""
    pooled, cache = attention_pool(
        query, v_patch, params.w_query, params.w_key, params.w_value, params.empty_token
    )
    attn = cache[5]
    return pooled, attn, cache


def soap_pool(q_sal: np.ndarray, v_patch: np.ndarray, params: PoolingParams) -> np.ndarray:
    """Single-image pooled fine-grained token."""
    pooled, _, _ = soap_pool_batch(q_sal[None, :], v_patch[None, :, :], params)
    return pooled[0]


def attention_weights(q_sal: np.ndarray, v_patch: np.ndarray, params: PoolingParams) -> np.ndarray:
    """Attention row over the n patch tokens plus the trailing empty token."""
    _, attn, _ = soap_pool_batch(q_sal[None, :], v_patch[None, :, :], params)
    return attn[0]


def fuse(local: np.ndarray, global_: np.ndarray, mode: str = "symmetric") -> np.ndarray:
    if mode == "symmetric":
        return (local + global_) / 2.0
    if mode == "global-only":
        return global_.copy()
    if mode == "local-only":
        return local.copy()
    raise ValueError(f"unknown fusion mode {mode!r}")


def fused_logits(
    v_fg: np.ndarray,
    v_cls: np.ndarray,
    bank: ClassifierBank,
    weights: EncoderWeights,
    mode: str = "symmetric",
) -> FusedLogits:
    """Cosine logits of the projected fine and global tokens, averaged."""
    local, _ = cosine_rows(project_shared(v_fg, weights)[None, :], bank.learnable)
    global_, _ = cosine_rows(project_shared(v_cls, weights)[None, :], bank.learnable)
    return FusedLogits(local[0], global_[0], fuse(local[0], global_[0], mode))
