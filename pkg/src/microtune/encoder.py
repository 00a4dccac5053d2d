"""Frozen toy vision transformer with trainable LayerNorm affines.

The encoder turns a square grayscale raster into patch tokens plus a CLS
token. Two token matrices are exposed: the standard final-layer output and
the attention-bypass variant, where the penultimate-layer tokens skip the
final block's attention and pass only through its value projection and MLP:

    mid = x_penult + x_penult @ W_v(final)
    v_patch = mid + MLP(mid)

All weights except the LayerNorm affines (and the shared-space projection,
which is always frozen) stay at their seeded initialization. A feature mode
ingests precomputed token records instead of running the transformer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import formats
from .autodiff import (
    GradientBundle,
    gelu,
    gelu_backward,
    layernorm,
    layernorm_backward,
    linear,
    linear_backward,
    self_attention,
    self_attention_backward,
)

__all__ = [
    "EncoderConfig",
    "EncoderWeights",
    "PatchTokenGrid",
    "init_encoder",
    "init_layernorm_params",
    "layernorm_param_names",
    "encode",
    "encode_batch",
    "encode_batch_cached",
    "encoder_backward",
    "bypass_attention",
    "bypass_attention_cached",
    "bypass_attention_backward",
    "project_shared",
    "load_feature_grid",
]


@dataclass
class EncoderConfig:
    layers: int = 4
    dim: int = 32
    dim_shared: int = 32
    patch: int = 8
    image_side: int = 56
    mlp_hidden: int = 64
    seed: int = 7
    # q/k init gain; larger values sharpen the random attention patterns
    attn_gain: float = 2.0
    # residual-branch output scale for all blocks before the last; the final
    # block mixes at full strength, which is why the bypass path skips it
    mix_scale: float = 0.15
    pos_scale: float = 0.08
    # shared bias direction added to every patch token; smooth low-contrast
    # patches cluster around it while textured patches point away
    token_bias_scale: float = 0.8
    # ablation switch: also apply the final block's output projection in the
    # bypass path (the default extraction rule uses the value projection only)
    bypass_output_proj: bool = False

    @property
    def grid_side(self) -> int:
        return self.image_side // self.patch

    @property
    def n_tokens(self) -> int:
        return self.grid_side**2


@dataclass
class PatchTokenGrid:
    """Per-image token matrices plus the global CLS vector."""

    x_patch_last: np.ndarray
    x_patch_penult: np.ndarray
    v_cls: np.ndarray
    grid_side: int

    def __post_init__(self):
        n, d = self.x_patch_last.shape
        if n != self.grid_side**2:
            raise ValueError(f"token count {n} is not grid_side^2 = {self.grid_side ** 2}")
        if self.x_patch_penult.shape != (n, d) or self.v_cls.shape != (d,):
            raise ValueError("token matrix shapes disagree")
        for arr in (self.x_patch_last, self.x_patch_penult, self.v_cls):
            if not np.all(np.isfinite(arr)):
                raise ValueError("non-finite tokens")

    @property
    def n(self) -> int:
        return self.x_patch_last.shape[0]

    @property
    def dim(self) -> int:
        return self.x_patch_last.shape[1]


@dataclass
class EncoderWeights:
    """Frozen encoder tensors; LayerNorm affines live in a separate dict."""

    config: EncoderConfig
    patch_w: np.ndarray
    patch_b: np.ndarray
    cls_token: np.ndarray
    pos: np.ndarray
    blocks: list[dict[str, np.ndarray]] = field(default_factory=list)
    p_clip: np.ndarray = None

    def frozen_tensors(self) -> dict[str, np.ndarray]:
        out = {
            "enc.patch_w": self.patch_w,
            "enc.patch_b": self.patch_b,
            "enc.cls_token": self.cls_token,
            "enc.pos": self.pos,
            "p_clip": self.p_clip,
        }
        for i, blk in enumerate(self.blocks):
            for key, arr in blk.items():
                out[f"enc.blk{i}.{key}"] = arr
        return out


def init_encoder(config: EncoderConfig) -> EncoderWeights:
    rng = np.random.default_rng(config.seed)
    d = config.dim
    ppx = config.patch**2
    # high-pass patch embedding: per-patch mean removal folded into the
    # projection keeps token directions texture-driven, not brightness-driven
    raw = rng.standard_normal((ppx, d)) * math.sqrt(2.0 / ppx)
    patch_w = raw - raw.mean(axis=0, keepdims=True)
    bias_dir = rng.standard_normal(d)
    patch_b = config.token_bias_scale * bias_dir / np.linalg.norm(bias_dir)
    cls_token = rng.standard_normal(d) / math.sqrt(d)
    pos = config.pos_scale * rng.standard_normal((config.n_tokens + 1, d))
    blocks = []
    for layer in range(config.layers):
        out_scale = 1.0 if layer == config.layers - 1 else config.mix_scale
        blocks.append(
            {
                "wq": config.attn_gain * rng.standard_normal((d, d)) / math.sqrt(d),
                "bq": np.zeros(d),
                "wk": config.attn_gain * rng.standard_normal((d, d)) / math.sqrt(d),
                "bk": np.zeros(d),
                "wv": rng.standard_normal((d, d)) / math.sqrt(d),
                "bv": np.zeros(d),
                "wo": out_scale * rng.standard_normal((d, d)) / math.sqrt(d),
                "bo": np.zeros(d),
                "w1": rng.standard_normal((d, config.mlp_hidden)) / math.sqrt(d),
                "b1": np.zeros(config.mlp_hidden),
                "w2": out_scale
                * rng.standard_normal((config.mlp_hidden, d))
                / math.sqrt(config.mlp_hidden),
                "b2": np.zeros(d),
            }
        )
    if config.dim_shared == d:
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        p_clip = q
    else:
        p_clip = rng.standard_normal((d, config.dim_shared)) / math.sqrt(d)
    return EncoderWeights(config, patch_w, patch_b, cls_token, pos, blocks, p_clip)


def layernorm_param_names(config: EncoderConfig) -> list[str]:
    names = []
    for i in range(config.layers):
        names += [f"enc.blk{i}.ln1.g", f"enc.blk{i}.ln1.b", f"enc.blk{i}.ln2.g", f"enc.blk{i}.ln2.b"]
    names += ["enc.ln_f.g", "enc.ln_f.b"]
    return names


def init_layernorm_params(config: EncoderConfig) -> dict[str, np.ndarray]:
    params = {}
    for name in layernorm_param_names(config):
        params[name] = np.zeros(config.dim) if name.endswith(".b") else np.ones(config.dim)
    return params


def _extract_patches(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W) in [0, 1] -> (B, n, patch*patch), centered around zero."""
    b, h, w = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(b, gh, patch, gw, patch).transpose(0, 1, 3, 2, 4)
    return x.reshape(b, gh * gw, patch * patch) - 0.5


def _block_forward(x, blk, g1, b1, g2, b2):
    h, ln1c = layernorm(x, g1, b1)
    a, attnc = self_attention(
        h, blk["wq"], blk["bq"], blk["wk"], blk["bk"], blk["wv"], blk["bv"], blk["wo"], blk["bo"]
    )
    x1 = x + a
    h2, ln2c = layernorm(x1, g2, b2)
    m1, lin1c = linear(h2, blk["w1"], blk["b1"])
    gm, gc = gelu(m1)
    m2, lin2c = linear(gm, blk["w2"], blk["b2"])
    return x1 + m2, (ln1c, attnc, ln2c, lin1c, gc, lin2c)


def _block_backward(dx2, cache):
    ln1c, attnc, ln2c, lin1c, gc, lin2c = cache
    dgm, _, _ = linear_backward(dx2, lin2c)
    dm1 = gelu_backward(dgm, gc)
    dh2, _, _ = linear_backward(dm1, lin1c)
    dx1_mlp, dg2, db2 = layernorm_backward(dh2, ln2c)
    dx1 = dx2 + dx1_mlp
    dh = self_attention_backward(dx1, attnc)
    dx_attn, dg1, db1 = layernorm_backward(dh, ln1c)
    return dx1 + dx_attn, (dg1, db1, dg2, db2)


def encode_batch_cached(images: np.ndarray, weights: EncoderWeights, ln_params: dict):
    """Full forward over a batch of rasters, recording block caches.

    Returns ``(x_last, x_penult, v_cls, cache)`` where token arrays are
    (B, n+1, d) with the CLS token at row 0 and ``v_cls`` is (B, d).
    """
    cfg = weights.config
    b, h, w = images.shape
    if h != cfg.image_side or w != cfg.image_side:
        raise ValueError(f"expected {cfg.image_side}x{cfg.image_side} raster, got {h}x{w}")
    patches = _extract_patches(images, cfg.patch)
    x, embed_cache = linear(patches, weights.patch_w, weights.patch_b)
    cls = np.broadcast_to(weights.cls_token, (b, 1, cfg.dim))
    x = np.concatenate([cls, x], axis=1) + weights.pos
    block_caches = []
    x_penult = None
    for i, blk in enumerate(weights.blocks):
        if i == cfg.layers - 1:
            x_penult = x
        x, c = _block_forward(
            x,
            blk,
            ln_params[f"enc.blk{i}.ln1.g"],
            ln_params[f"enc.blk{i}.ln1.b"],
            ln_params[f"enc.blk{i}.ln2.g"],
            ln_params[f"enc.blk{i}.ln2.b"],
        )
        block_caches.append(c)
    v_cls, lnf_cache = layernorm(x[:, 0, :], ln_params["enc.ln_f.g"], ln_params["enc.ln_f.b"])
    cache = (block_caches, lnf_cache, x.shape)
    return x, x_penult, v_cls, cache


def encoder_backward(
    d_x_last: np.ndarray | None,
    d_x_penult: np.ndarray | None,
    d_v_cls: np.ndarray | None,
    cache,
    grads: GradientBundle,
) -> None:
    """Accumulates LayerNorm-affine gradients from the three encoder outputs.

    ``d_x_penult`` is the gradient flowing directly into the penultimate
    activations (the bypass path); it joins the main chain below the final
    block. Frozen tensors receive no gradient by construction.
    """
    block_caches, lnf_cache, shape = cache
    dx = np.zeros(shape) if d_x_last is None else d_x_last.copy()
    if d_v_cls is not None:
        dcls, dgf, dbf = layernorm_backward(d_v_cls, lnf_cache)
        grads.accumulate("enc.ln_f.g", dgf)
        grads.accumulate("enc.ln_f.b", dbf)
        dx[:, 0, :] += dcls
    last = len(block_caches) - 1
    for i in range(last, -1, -1):
        dx, (dg1, db1, dg2, db2) = _block_backward(dx, block_caches[i])
        grads.accumulate(f"enc.blk{i}.ln1.g", dg1)
        grads.accumulate(f"enc.blk{i}.ln1.b", db1)
        grads.accumulate(f"enc.blk{i}.ln2.g", dg2)
        grads.accumulate(f"enc.blk{i}.ln2.b", db2)
        if i == last and d_x_penult is not None:
            dx = dx + d_x_penult


def encode_batch(images: np.ndarray, weights: EncoderWeights, ln_params: dict):
    """(x_patch_last, x_patch_penult, v_cls) without the CLS rows."""
    x_last, x_penult, v_cls, _ = encode_batch_cached(images, weights, ln_params)
    return x_last[:, 1:, :], x_penult[:, 1:, :], v_cls


def encode(image: np.ndarray, weights: EncoderWeights, ln_params: dict) -> PatchTokenGrid:
    """Single-raster convenience wrapper around the batched forward."""
    last, penult, v_cls = encode_batch(image[None, :, :], weights, ln_params)
    return PatchTokenGrid(last[0], penult[0], v_cls[0], weights.config.grid_side)


def bypass_attention_cached(x_patch_penult: np.ndarray, weights: EncoderWeights):
    """Attention-bypass token extraction over (B, n, d) penultimate tokens."""
    blk = weights.blocks[-1]
    proj, projc = linear(x_patch_penult, blk["wv"])
    if weights.config.bypass_output_proj:
        proj, projc2 = linear(proj, blk["wo"])
    else:
        projc2 = None
    mid = x_patch_penult + proj
    m1, lin1c = linear(mid, blk["w1"], blk["b1"])
    gm, gc = gelu(m1)
    m2, lin2c = linear(gm, blk["w2"], blk["b2"])
    return mid + m2, (projc, projc2, lin1c, gc, lin2c)


def bypass_attention_backward(dv_patch, cache):
    projc, projc2, lin1c, gc, lin2c = cache
    dgm, _, _ = linear_backward(dv_patch, lin2c)
    dm1 = gelu_backward(dgm, gc)
    dmid_mlp, _, _ = linear_backward(dm1, lin1c)
    dmid = dv_patch + dmid_mlp
    dproj = dmid
    if projc2 is not None:
        dproj, _, _ = linear_backward(dproj, projc2)
    dpen_proj, _, _ = linear_backward(dproj, projc)
    return dmid + dpen_proj


def bypass_attention(grid: PatchTokenGrid, weights: EncoderWeights) -> np.ndarray:
    v_patch, _ = bypass_attention_cached(grid.x_patch_penult[None], weights)
    return v_patch[0]


def project_shared(v: np.ndarray, weights: EncoderWeights) -> np.ndarray:
    """Map vision-space vectors into the shared embedding space (frozen)."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite embedding")
    return v @ weights.p_clip


def load_feature_grid(path) -> PatchTokenGrid:
    """Build a PatchTokenGrid from an MCFT record.

    Records without penultimate tokens reuse the final-layer tokens for the
    bypass input; records without a CLS vector are rejected because every
    downstream path needs the global token.
    """
    last, penult, cls = formats.read_feature_record(path)
    n = last.shape[0]
    side = math.isqrt(n)
    if side * side != n:
        raise ValueError(f"{path}: token count {n} is not a perfect square")
    if cls is None:
        raise ValueError(f"{path}: feature record lacks a CLS vector")
    if penult is None:
        penult = last.copy()
    return PatchTokenGrid(last, penult, cls, side)
