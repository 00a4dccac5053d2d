"""Two-headed prototype classifier built from description embeddings.

Each class contributes a handful of description embeddings in the shared
space; their per-class average initializes both heads. The frozen head backs
pseudo-labeling for the whole run, the learnable head is fine-tuned with the
token-fusion logits. Rows are stored unnormalized; cosine similarity
normalizes at use time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import formats

__all__ = [
    "ClassifierBank",
    "DescriptionEmbeddingSet",
    "init_classifiers",
    "load_descriptions",
    "save_descriptions",
]


@dataclass
class DescriptionEmbeddingSet:
    per_class: list[np.ndarray]

    @property
    def n_classes(self) -> int:
        return len(self.per_class)

    @property
    def dim(self) -> int:
        return self.per_class[0].shape[1]


@dataclass
class ClassifierBank:
    frozen: np.ndarray  # (C, d_shared), never updated after init
    learnable: np.ndarray  # (C, d_shared), fine-tuned by the trainer
    class_names: list[str] = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return self.frozen.shape[0]

    @property
    def dim_shared(self) -> int:
        return self.frozen.shape[1]


def init_classifiers(
    descriptions: DescriptionEmbeddingSet,
    class_names: list[str] | None = None,
    normalize_before_average: bool = False,
) -> ClassifierBank:
    """Average each class's description embeddings into a prototype row.

    Both heads start identical; the frozen head is a detached copy. Raw
    averaging is the default; ``normalize_before_average`` unit-normalizes
    each description first (alternative convention).
    """
    rows = []
    for j, emb in enumerate(descriptions.per_class):
        emb = np.asarray(emb, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] < 1:
            raise ValueError(f"class {j} has no descriptions")
        if normalize_before_average:
            norms = np.linalg.norm(emb, axis=1, keepdims=True)
            if np.any(norms == 0.0):
                raise ValueError(f"class {j} has a zero-norm description")
            emb = emb / norms
        row = emb.mean(axis=0)
        if np.linalg.norm(row) < 1e-12:
            raise ValueError("degenerate prototype")
        rows.append(row)
    proto = np.stack(rows)
    if class_names is None:
        class_names = [f"class{j}" for j in range(len(rows))]
    if len(class_names) != len(rows):
        raise ValueError("class name count mismatch")
    return ClassifierBank(frozen=proto.copy(), learnable=proto.copy(), class_names=list(class_names))


def load_descriptions(path, expected_classes: int | None = None) -> DescriptionEmbeddingSet:
    per_class = formats.read_descriptions(path)
    if expected_classes is not None and len(per_class) != expected_classes:
        raise ValueError(
            f"{path}: {len(per_class)} classes in description file, manifest has {expected_classes}"
        )
    for arrays in per_class:
        if not np.all(np.isfinite(arrays)):
            raise ValueError(f"{path}: non-finite description embedding")
    return DescriptionEmbeddingSet(per_class)


def save_descriptions(path, descriptions: DescriptionEmbeddingSet) -> None:
    formats.write_descriptions(path, descriptions.per_class)
