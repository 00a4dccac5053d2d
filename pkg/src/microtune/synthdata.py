"""Procedural fine-grained benchmark: classes differ only by a small glyph.

Every image is a smooth value-noise background (one family, identical
statistics for all classes) plus a class-specific high-contrast glyph
stamped at a random position. All class information therefore lives in a
few dozen pixels, which is exactly the regime where pooled local tokens
beat the global one.

Description embeddings stand in for an externally pretrained text head:
class anchors are the orthonormalized, centered class means of the frozen
encoder's projected global embeddings over the train split, perturbed per
description. That reproduces the essential property of a pretrained
vision-text pairing (class-discriminative but imperfect alignment) without
shipping one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import formats
from .classifier import DescriptionEmbeddingSet
from .encoder import EncoderConfig, EncoderWeights, encode_batch, init_encoder, init_layernorm_params
from .pseudolabel import aggregate_views, crop_weights, multi_crop

__all__ = [
    "SynthSpec",
    "GeneratedDataset",
    "value_noise",
    "glyph_patterns",
    "render_image",
    "generate",
    "class_anchors_from_features",
    "synth_descriptions",
]


@dataclass
class SynthSpec:
    classes: int = 8
    images_per_class: int = 40
    image_side: int = 56
    glyph_side: int = 8
    background_amplitude: float = 0.12
    background_cells: int = 4
    noise_sigma: float = 0.02
    glyph_lo: float = 0.02
    glyph_hi: float = 0.98
    # "patch" snaps glyph corners to the patch grid (one clean glyph token
    # per image); "free" places them anywhere
    glyph_align: str = "patch"
    descriptions_per_class: int = 5
    description_noise: float = 0.6
    train_fraction: float = 0.8
    seed: int = 0

    def validate(self) -> None:
        if self.glyph_side > self.image_side:
            raise ValueError("glyph must fit inside the image")
        if self.classes < 2 or self.images_per_class < 2:
            raise ValueError("need at least two classes and two images per class")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train fraction must be in (0, 1)")


@dataclass
class GeneratedDataset:
    root: Path
    train_manifest: Path
    test_manifest: Path
    descriptions_path: Path
    glyph_positions_path: Path


def value_noise(rng: np.random.Generator, side: int, cells: int, amplitude: float) -> np.ndarray:
    """Smooth background: bilinear upsampling of a coarse gaussian grid."""
    coarse = rng.standard_normal((cells + 1, cells + 1))
    pos = np.linspace(0, cells, side)
    lo = np.minimum(pos.astype(np.int64), cells - 1)
    frac = pos - lo
    rows = coarse[lo] * (1 - frac[:, None]) + coarse[lo + 1] * frac[:, None]
    field = rows[:, lo] * (1 - frac) + rows[:, lo + 1] * frac
    return 0.5 + amplitude * field


def glyph_patterns(spec: SynthSpec) -> np.ndarray:
    """One binary pattern per class with a guaranteed pairwise separation.

    Patterns are balanced (exact 50% fill), so no class is separable from
    glyph brightness statistics alone, and cells are 2x2-pixel blocks coarse
    enough to survive the bilinear resampling of the multi-crop views. For
    up to 15 classes the cells come from the balanced 2-D Walsh basis on a
    4x4 grid, which makes the patterns exactly orthogonal in pixel space
    (pairwise Hamming distance 8 of 16); beyond that, random balanced
    patterns with a 40% distance floor fill in.
    """
    rng = np.random.default_rng(spec.seed + 7_001)
    cell_px = 2 if spec.glyph_side % 2 == 0 else 1
    grid = spec.glyph_side // cell_px
    patterns: list[np.ndarray] = []
    if grid == 4 and spec.classes <= 15:
        h4 = np.array([[1, 1, 1, 1], [1, -1, 1, -1], [1, 1, -1, -1], [1, -1, -1, 1]])
        basis = [np.outer(h4[i], h4[j]).ravel() for i in range(4) for j in range(4)]
        balanced = [(b > 0).astype(np.float64) for b in basis[1:]]  # drop the DC pattern
        picks = rng.permutation(len(balanced))[: spec.classes]
        patterns = [balanced[k] for k in picks]
    else:
        cells = grid**2
        fill = cells // 2
        min_dist = max(1, int(0.4 * cells))
        while len(patterns) < spec.classes:
            flat = np.zeros(cells)
            flat[rng.permutation(cells)[:fill]] = 1.0
            if all(int(np.sum(np.abs(flat - q))) >= min_dist for q in patterns):
                patterns.append(flat)
    blocks = np.stack(patterns).reshape(spec.classes, grid, grid)
    return np.kron(blocks, np.ones((cell_px, cell_px)))


def render_image(
    spec: SynthSpec, pattern: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, tuple[int, int]]:
    """Background + glyph + pixel noise; returns the raster and glyph corner."""
    img = value_noise(rng, spec.image_side, spec.background_cells, spec.background_amplitude)
    limit = spec.image_side - spec.glyph_side
    if spec.glyph_align == "patch":
        step = spec.glyph_side
        r0 = int(rng.integers(0, limit // step + 1)) * step
        c0 = int(rng.integers(0, limit // step + 1)) * step
    else:
        r0 = int(rng.integers(0, limit + 1))
        c0 = int(rng.integers(0, limit + 1))
    stamp = np.where(pattern > 0.5, spec.glyph_hi, spec.glyph_lo)
    img[r0 : r0 + spec.glyph_side, c0 : c0 + spec.glyph_side] = stamp
    img = img + spec.noise_sigma * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0), (r0, c0)


def class_anchors_from_features(features_by_class: list[np.ndarray]) -> np.ndarray:
    """Orthonormal class anchors nearest to the centered class means.

    The class means are centered, projected orthogonal to the global-mean
    direction (whose contribution to every cosine score is class-independent
    noise otherwise), and mapped to the closest orthonormal frame via the
    polar factor. The result is exactly orthonormal.
    """
    means = np.stack([f.mean(axis=0) for f in features_by_class])
    global_mean = np.concatenate(features_by_class).mean(axis=0)
    norm = np.linalg.norm(global_mean)
    centered = means - means.mean(axis=0)
    if norm > 0:
        ghat = global_mean / norm
        centered = centered - np.outer(centered @ ghat, ghat)
    u, _, vt = np.linalg.svd(centered, full_matrices=False)
    return u @ vt


def synth_descriptions(
    anchors: np.ndarray, per_class: int, noise: float, rng: np.random.Generator
) -> DescriptionEmbeddingSet:
    """Per class, unit vectors drawn as anchor + isotropic noise."""
    sets = []
    for anchor in anchors:
        emb = anchor[None, :] + noise * rng.standard_normal((per_class, anchor.size))
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        sets.append(emb)
    return DescriptionEmbeddingSet(sets)


def _encode_projected(
    images: np.ndarray, weights: EncoderWeights, ln_params: dict
) -> np.ndarray:
    _, _, v_cls = encode_batch(images, weights, ln_params)
    return v_cls @ weights.p_clip


def _pooled_projected(
    images: np.ndarray, weights: EncoderWeights, ln_params: dict
) -> np.ndarray:
    """Saliency-query means of the bypass tokens, in shared space.

    Uses the raw query (no trained pooling) so generation does not depend on
    any trainable state.
    """
    from .encoder import bypass_attention_cached
    from .saliency import build_affinity, ncut_bipartition, saliency_query

    _, x_penult, _ = encode_batch(images, weights, ln_params)
    v_patch, _ = bypass_attention_cached(x_penult, weights)
    out = np.empty((images.shape[0], weights.config.dim_shared))
    for i in range(images.shape[0]):
        part = ncut_bipartition(build_affinity(v_patch[i]))
        out[i] = saliency_query(part, v_patch[i]) @ weights.p_clip
    return out


def generate(
    spec: SynthSpec, out_dir, encoder_config: EncoderConfig | None = None
) -> GeneratedDataset:
    """Write rasters, stratified manifests, glyph metadata, and descriptions.

    The description file is derived from the same frozen encoder the trainer
    will instantiate, so its seed must match the training run.
    """
    spec.validate()
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    patterns = glyph_patterns(spec)

    records = []  # (image_id, rel_path, label, raster, glyph corner)
    for label in range(spec.classes):
        for k in range(spec.images_per_class):
            image_id = f"c{label:02d}_{k:03d}"
            rng = np.random.default_rng(
                np.random.SeedSequence([spec.seed, 11, label, k]).generate_state(1)[0]
            )
            raster, corner = render_image(spec, patterns[label], rng)
            rel = f"images/{image_id}.pgm"
            formats.write_pgm(out_dir / rel, raster)
            records.append((image_id, rel, label, formats.read_pgm(out_dir / rel), corner))

    split_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 23]).generate_state(1)[0])
    train_rows, test_rows = [], []
    n_train_per_class = int(round(spec.train_fraction * spec.images_per_class))
    for label in range(spec.classes):
        block = records[label * spec.images_per_class : (label + 1) * spec.images_per_class]
        order = split_rng.permutation(len(block))
        for pos, idx in enumerate(order):
            row = block[idx]
            (train_rows if pos < n_train_per_class else test_rows).append(row)
    train_rows.sort(key=lambda r: r[0])
    test_rows.sort(key=lambda r: r[0])

    train_manifest = out_dir / "train.tsv"
    test_manifest = out_dir / "test.tsv"
    formats.write_manifest(train_manifest, [(r[0], r[1], r[2]) for r in train_rows])
    formats.write_manifest(test_manifest, [(r[0], r[1], r[2]) for r in test_rows])

    glyphs_path = out_dir / "glyphs.csv"
    with open(glyphs_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("image_id,row,col\n")
        for image_id, _, _, _, (r0, c0) in sorted(records, key=lambda r: r[0]):
            fh.write(f"{image_id},{r0},{c0}\n")

    # description embeddings from the frozen encoder's view of the train
    # split: per class, the full-frame embeddings, the multi-crop aggregates,
    # and the saliency-pooled tokens all contribute, so the prototypes serve
    # every scoring path from the start
    if encoder_config is None:
        encoder_config = EncoderConfig()
    weights = init_encoder(encoder_config)
    ln_params = init_layernorm_params(encoder_config)
    crop_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 59]).generate_state(1)[0])
    per_class_feats = []
    for label in range(spec.classes):
        imgs = np.stack([r[3] for r in train_rows if r[2] == label])
        full = _encode_projected(imgs, weights, ln_params)
        pooled = _pooled_projected(imgs, weights, ln_params)
        aggs = np.empty_like(full)
        for i in range(imgs.shape[0]):
            crop_set = multi_crop(imgs[i], 8, 0.5, 0.9, crop_rng, encoder_config.image_side)
            crop_emb = _encode_projected(crop_set.crops, weights, ln_params)
            weights_i = crop_weights(full[i], crop_emb)
            aggs[i] = aggregate_views(crop_emb, weights_i)
        per_class_feats.append(np.concatenate([full, aggs, pooled]))
    anchors = class_anchors_from_features(per_class_feats)
    desc_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 41]).generate_state(1)[0])
    descriptions = synth_descriptions(
        anchors, spec.descriptions_per_class, spec.description_noise, desc_rng
    )
    descriptions_path = out_dir / "descriptions.mcde"
    formats.write_descriptions(descriptions_path, descriptions.per_class)

    return GeneratedDataset(out_dir, train_manifest, test_manifest, descriptions_path, glyphs_path)
