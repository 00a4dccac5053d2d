"""Token saliency via normalized-cut bipartition of an affinity graph.

Tokens are graph nodes; an edge gets weight 1 when the pairwise cosine
similarity clears a threshold and a small floor weight otherwise. The
Fiedler vector of the normalized Laplacian is thresholded at its mean, and
the side holding the largest-magnitude entry is selected as salient. The
mean of the selected token rows forms the pooling query.

Graph modes: ``dense`` connects every token pair (default for small grids);
``grid`` keeps only 8-neighborhood edges on the patch grid and uses the
iterative solver. Selection happens outside any gradient path; only the
averaging over the selected (fixed) rows is differentiable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .linalg import (
    ConvergenceError,
    DisconnectedGraphError,
    EigenPair,
    SparseSymMatrix,
    dense_sym_eigen,
    fiedler_vector,
)

__all__ = [
    "AffinityGraph",
    "SaliencyPartition",
    "build_affinity",
    "ncut_bipartition",
    "saliency_query",
    "export_saliency_mask",
    "DENSE_MODE_MAX_TOKENS",
]

DEFAULT_TAU = 0.2
DEFAULT_EPS = 1e-5
DENSE_MODE_MAX_TOKENS = 256
# Fiedler spread below this is thresholding noise; fall back to all tokens.
DEGENERATE_SPREAD = 1e-9


@dataclass
class AffinityGraph:
    mode: str
    matrix: object  # dense ndarray (zero diagonal) or SparseSymMatrix
    tau: float
    eps: float

    @property
    def dim(self) -> int:
        if isinstance(self.matrix, SparseSymMatrix):
            return self.matrix.dim
        return self.matrix.shape[0]

    def degrees(self) -> np.ndarray:
        if isinstance(self.matrix, SparseSymMatrix):
            return self.matrix.degrees()
        return self.matrix.sum(axis=1)


@dataclass
class SaliencyPartition:
    fiedler: EigenPair | None
    threshold: float
    selected: np.ndarray  # sorted token indices
    used_fallback: bool = False

    @property
    def fiedler_gap(self) -> float:
        """Second-smallest normalized-Laplacian eigenvalue (0 on fallback)."""
        return self.fiedler.value if self.fiedler is not None else 0.0


def _cosine_matrix(v_patch: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(v_patch, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("degenerate token")
    unit = v_patch / norms[:, None]
    cos = unit @ unit.T
    return np.clip(cos, -1.0, 1.0)


def _grid_neighbor_pairs(side: int) -> tuple[np.ndarray, np.ndarray]:
    idx = np.arange(side * side).reshape(side, side)
    pairs_i, pairs_j = [], []
    for dr, dc in ((0, 1), (1, 0), (1, 1), (1, -1)):
        r0 = slice(0, side - dr)
        r1 = slice(dr, side)
        c0 = slice(max(0, -dc), side - max(0, dc))
        c1 = slice(max(0, dc), side + min(0, dc))
        a = idx[r0, c0].ravel()
        b = idx[r1, c1].ravel()
        pairs_i.append(np.minimum(a, b))
        pairs_j.append(np.maximum(a, b))
    return np.concatenate(pairs_i), np.concatenate(pairs_j)


def build_affinity(
    v_patch: np.ndarray,
    mode: str | None = None,
    tau: float = DEFAULT_TAU,
    eps: float = DEFAULT_EPS,
) -> AffinityGraph:
    """Binarized cosine-affinity graph over token rows.

    Edge (i, j) weighs 1 when cos(v_i, v_j) >= tau, else ``eps``. With
    ``mode=None`` small token sets get the dense graph and larger ones the
    8-neighborhood grid graph.
    """
    v_patch = np.asarray(v_patch, dtype=np.float64)
    n = v_patch.shape[0]
    if n < 2:
        raise ValueError("need at least two tokens")
    if mode is None:
        mode = "dense" if n <= DENSE_MODE_MAX_TOKENS else "grid"
    cos = _cosine_matrix(v_patch)
    if mode == "dense":
        w = np.where(cos >= tau, 1.0, eps)
        np.fill_diagonal(w, 0.0)
        return AffinityGraph("dense", w, tau, eps)
    if mode == "grid":
        side = math.isqrt(n)
        if side * side != n:
            raise ValueError(f"grid mode needs a square token count, got {n}")
        rows, cols = _grid_neighbor_pairs(side)
        weights = np.where(cos[rows, cols] >= tau, 1.0, eps)
        return AffinityGraph("grid", SparseSymMatrix(n, rows, cols, weights), tau, eps)
    raise ValueError(f"unknown affinity mode {mode!r}")


def _fallback(n: int) -> SaliencyPartition:
    return SaliencyPartition(None, 0.0, np.arange(n), used_fallback=True)


def _dense_fiedler(matrix: np.ndarray, degrees: np.ndarray) -> EigenPair:
    inv_sqrt = 1.0 / np.sqrt(degrees)
    lsym = -matrix * np.outer(inv_sqrt, inv_sqrt)
    np.fill_diagonal(lsym, 1.0)
    pair = dense_sym_eigen(lsym)[1]
    vec = pair.vector
    if vec[np.argmax(np.abs(vec))] < 0:
        vec = -vec
    return EigenPair(pair.value, vec)


def ncut_bipartition(graph: AffinityGraph, select_rule: str = "max_abs") -> SaliencyPartition:
    """Bipartition the token graph along its Fiedler vector.

    The threshold is the mean Fiedler entry. ``select_rule='max_abs'`` keeps
    the side containing the largest-magnitude entry; ``'mean_side'`` keeps
    the side with the larger mean entry instead (alternative convention).
    Disconnected graphs and degenerate Fiedler spreads select all tokens and
    set ``used_fallback``.
    """
    n = graph.dim
    degrees = graph.degrees()
    if np.any(degrees <= 0):
        return _fallback(n)
    try:
        if isinstance(graph.matrix, SparseSymMatrix):
            pair = fiedler_vector(graph.matrix, degrees)
        else:
            pair = _dense_fiedler(graph.matrix, degrees)
    except (DisconnectedGraphError, ConvergenceError):
        return _fallback(n)
    z = pair.vector
    if z.max() - z.min() < DEGENERATE_SPREAD:
        return _fallback(n)
    threshold = float(z.mean())
    high = z >= threshold
    if select_rule == "max_abs":
        keep_high = high[int(np.argmax(np.abs(z)))]
    elif select_rule == "mean_side":
        # alternative convention: keep the side with larger mean magnitude
        keep_high = np.abs(z[high]).mean() >= np.abs(z[~high]).mean() if (~high).any() else True
    else:
        raise ValueError(f"unknown select rule {select_rule!r}")
    selected = np.nonzero(high if keep_high else ~high)[0]
    if selected.size == 0 or selected.size == n:
        return _fallback(n)
    return SaliencyPartition(pair, threshold, selected)


def saliency_query(partition: SaliencyPartition, v_patch: np.ndarray) -> np.ndarray:
    """Mean of the selected token rows."""
    if partition.selected.size == 0:
        raise ValueError("empty selection")
    return v_patch[partition.selected].mean(axis=0)


def export_saliency_mask(partition: SaliencyPartition, grid_side: int) -> np.ndarray:
    """Row-major binary grid marking the selected tokens."""
    mask = np.zeros(grid_side * grid_side, dtype=np.int64)
    mask[partition.selected] = 1
    return mask.reshape(grid_side, grid_side)
