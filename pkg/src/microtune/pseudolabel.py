"""Multi-view pseudo-labeling with dynamic blending.

A handful of random square crops of each image act as weak views. Each crop
embedding is weighted by the softmax of its cosine similarity to the
full-image embedding, the weighted views are summed into one aggregated
embedding, and its cosine scores against the frozen classifier head give the
stable pseudo-logits. The final pseudo-label is the argmax of a convex blend
of those scores with the current fused token logits; the whole branch runs
outside the gradient path.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .classifier import ClassifierBank
from .linalg import row_softmax

__all__ = [
    "CropSet",
    "PseudoLabelDecision",
    "derive_rng",
    "resize_bilinear",
    "center_crop",
    "multi_crop",
    "crop_weights",
    "aggregate_views",
    "clip_pseudo_logits",
    "dynamic_aggregate",
]


def derive_rng(seed: int, *parts) -> np.random.Generator:
    """Deterministic per-purpose RNG stream from (seed, labels...)."""
    key = ":".join(str(p) for p in (seed, *parts)).encode("utf-8")
    digest = hashlib.sha256(key).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


@dataclass
class CropSet:
    crops: np.ndarray  # (N, side, side), resized to the encoder input
    scales: np.ndarray  # (N,), sampled crop scales
    positions: np.ndarray  # (N, 2), top-left (row, col) in the source image


@dataclass
class PseudoLabelDecision:
    pseudo_logits_clip: np.ndarray
    tokenfusion_logits: np.ndarray
    gamma: float
    blended: np.ndarray
    label: int

    @property
    def margin(self) -> float:
        """Top-1 minus top-2 blended score."""
        top = np.sort(self.blended)[-2:]
        return float(top[1] - top[0])


def resize_bilinear(image: np.ndarray, out_side: int) -> np.ndarray:
    """Separable bilinear resampling of a square grayscale raster."""
    h, w = image.shape
    if (h, w) == (out_side, out_side):
        return image.astype(np.float64, copy=True)

    def grid(src, dst):
        # align-corners-free mapping, matching the usual image convention
        pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
        pos = np.clip(pos, 0.0, src - 1.0)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, src - 1)
        frac = pos - lo
        return lo, hi, frac

    r0, r1, fr = grid(h, out_side)
    c0, c1, fc = grid(w, out_side)
    top = image[r0][:, c0] * (1 - fc) + image[r0][:, c1] * fc
    bot = image[r1][:, c0] * (1 - fc) + image[r1][:, c1] * fc
    return top * (1 - fr[:, None]) + bot * fr[:, None]


def center_crop(image: np.ndarray, out_side: int) -> np.ndarray:
    """Largest centered square, resized to the encoder input side."""
    h, w = image.shape
    side = min(h, w)
    r0 = (h - side) // 2
    c0 = (w - side) // 2
    return resize_bilinear(image[r0 : r0 + side, c0 : c0 + side], out_side)


def multi_crop(
    image: np.ndarray,
    n_crops: int,
    scale_min: float,
    scale_max: float,
    rng: np.random.Generator,
    out_side: int,
) -> CropSet:
    """N random square crops with side ``scale * min(H, W)``.

    Scales are uniform on [scale_min, scale_max], positions uniform over the
    valid range; each crop is resized to the encoder input side.
    """
    h, w = image.shape
    base = min(h, w)
    if base < 2:
        raise ValueError("image too small to crop")
    crops = np.empty((n_crops, out_side, out_side))
    scales = np.empty(n_crops)
    positions = np.empty((n_crops, 2), dtype=np.int64)
    for i in range(n_crops):
        lam = float(rng.uniform(scale_min, scale_max))
        side = max(2, int(round(lam * base)))
        side = min(side, base)
        r0 = int(rng.integers(0, h - side + 1))
        c0 = int(rng.integers(0, w - side + 1))
        crops[i] = resize_bilinear(image[r0 : r0 + side, c0 : c0 + side], out_side)
        scales[i] = lam
        positions[i] = (r0, c0)
    return CropSet(crops, scales, positions)


def _cosines_to_rows(v: np.ndarray, rows: np.ndarray) -> np.ndarray:
    nv = np.linalg.norm(v)
    nr = np.linalg.norm(rows, axis=1)
    if nv == 0.0 or np.any(nr == 0.0):
        raise ValueError("degenerate embedding")
    return (rows @ v) / (nr * nv)


def crop_weights(f_global: np.ndarray, f_crops: np.ndarray) -> np.ndarray:
    """Softmax over the cosine similarities of each crop to the full image."""
    sims = _cosines_to_rows(f_global, f_crops)
    return row_softmax(sims)


def aggregate_views(f_crops: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted sum of the crop embeddings."""
    weights = np.asarray(weights, dtype=np.float64)
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError("weights must sum to 1")
    return weights @ f_crops


def clip_pseudo_logits(f_agg: np.ndarray, bank: ClassifierBank, source: str = "frozen") -> np.ndarray:
    """Per-class cosine of the aggregated view embedding.

    Uses the frozen head by default; ``source='learnable'`` is the shared-
    classifier ablation.
    """
    rows = bank.frozen if source == "frozen" else bank.learnable
    return _cosines_to_rows(f_agg, rows)


def dynamic_aggregate(
    pseudo_logits: np.ndarray, tokenfusion_logits: np.ndarray, gamma: float
) -> PseudoLabelDecision:
    """Convex blend of the stable and evolving score vectors.

    ``gamma=1`` reduces to the multi-view scores, ``gamma=0`` to the token
    fusion scores. Ties break toward the lowest class index (argmax does).
    The caller must treat the result as a constant; no gradient flows here.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    p = np.asarray(pseudo_logits, dtype=np.float64)
    t = np.asarray(tokenfusion_logits, dtype=np.float64)
    blended = gamma * p + (1.0 - gamma) * t
    return PseudoLabelDecision(p, t, float(gamma), blended, int(np.argmax(blended)))
