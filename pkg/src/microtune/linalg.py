"""Dense and sparse linear-algebra substrate.

Dense matrices and vectors are float64 numpy arrays in row-major order.
Symmetric sparse matrices store the upper triangle in coordinate form.
The iterative Fiedler solver targets the second-smallest eigenpair of the
symmetrically normalized graph Laplacian; the dense solver doubles as its
cross-check oracle.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ConvergenceError",
    "DisconnectedGraphError",
    "EigenPair",
    "SparseSymMatrix",
    "row_softmax",
    "cosine_sim",
    "dense_sym_eigen",
    "fiedler_vector",
    "is_connected",
]

# Deterministic start vector for the power iteration; any fixed seed works,
# the residual criterion decides convergence.
_POWER_SEED = 0xF1ED


class ConvergenceError(RuntimeError):
    """Iterative solver hit its iteration cap; carries the final residual."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (final residual {residual:.3e})")
        self.residual = residual


class DisconnectedGraphError(ValueError):
    pass


@dataclass(frozen=True)
class EigenPair:
    value: float
    vector: np.ndarray


@dataclass
class SparseSymMatrix:
    """Symmetric matrix with nonnegative weights, stored as upper-triangle COO.

    Entries are (rows[k], cols[k], weights[k]) with rows[k] <= cols[k] and no
    duplicate coordinates.
    """

    dim: int
    rows: np.ndarray
    cols: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64)
        self.cols = np.asarray(self.cols, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if not (self.rows.shape == self.cols.shape == self.weights.shape):
            raise ValueError("rows, cols, weights must have equal length")
        if np.any(self.rows > self.cols):
            raise ValueError("entries must satisfy i <= j")
        if np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative")
        if self.rows.size:
            if np.any(self.rows < 0) or np.any(self.cols >= self.dim):
                raise ValueError("index out of range")
            keys = self.rows * self.dim + self.cols
            if np.unique(keys).size != keys.size:
                raise ValueError("duplicate (i, j) entry")

    def matvec(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        y = np.bincount(self.rows, self.weights * x[self.cols], minlength=self.dim)
        off = self.rows != self.cols
        y += np.bincount(
            self.cols[off], self.weights[off] * x[self.rows[off]], minlength=self.dim
        )
        return y

    def degrees(self) -> np.ndarray:
        return self.matvec(np.ones(self.dim))

    def to_dense(self) -> np.ndarray:
        m = np.zeros((self.dim, self.dim))
        m[self.rows, self.cols] = self.weights
        m[self.cols, self.rows] = self.weights
        return m


def row_softmax(m: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis.

    Accepts a vector or a matrix; each row of the result is nonnegative and
    sums to 1.
    """
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise ValueError("non-finite logits")
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("degenerate embedding")
    return float(np.dot(a, b) / (na * nb))


def dense_sym_eigen(m: np.ndarray, sym_tol: float = 1e-10) -> list[EigenPair]:
    """Full spectrum of a symmetric matrix, ascending, via LAPACK.

    Serves as the oracle for the iterative Fiedler solver. Verifies the input
    is symmetric within ``sym_tol`` and that the spectral reconstruction error
    stays below 1e-8 relative to the Frobenius norm.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("matrix must be square")
    asym = np.max(np.abs(m - m.T)) if m.size else 0.0
    if asym > sym_tol:
        raise ValueError(f"matrix asymmetric beyond tolerance ({asym:.3e} > {sym_tol:.3e})")
    values, vectors = np.linalg.eigh(m)
    recon = (vectors * values) @ vectors.T
    scale = max(np.linalg.norm(m), 1.0)
    err = np.linalg.norm(m - recon) / scale
    if err > 1e-8:
        raise RuntimeError(f"eigendecomposition reconstruction error {err:.3e}")
    return [EigenPair(float(values[k]), vectors[:, k].copy()) for k in range(m.shape[0])]


def _adjacency_lists(affinity) -> list[list[int]]:
    if isinstance(affinity, SparseSymMatrix):
        n = affinity.dim
        adj: list[list[int]] = [[] for _ in range(n)]
        for i, j, w in zip(affinity.rows, affinity.cols, affinity.weights):
            if w > 0 and i != j:
                adj[i].append(int(j))
                adj[j].append(int(i))
        return adj
    a = np.asarray(affinity)
    n = a.shape[0]
    return [list(np.nonzero(a[i] > 0)[0]) for i in range(n)]


def is_connected(affinity) -> bool:
    """BFS connectivity over edges with strictly positive weight."""
    adj = _adjacency_lists(affinity)
    n = len(adj)
    seen = np.zeros(n, dtype=bool)
    queue = deque([0])
    seen[0] = True
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if not seen[v]:
                seen[v] = True
                queue.append(v)
    return bool(seen.all())


def _affinity_matvec(affinity):
    if isinstance(affinity, SparseSymMatrix):
        return affinity.dim, affinity.matvec
    a = np.asarray(affinity, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("affinity must be square")
    return a.shape[0], lambda x: a @ x


def fiedler_vector(
    affinity,
    degrees: np.ndarray | None = None,
    tol: float = 1e-10,
    max_iter: int = 50_000,
) -> EigenPair:
    """Second-smallest eigenpair of the normalized Laplacian of a graph.

    ``affinity`` is a :class:`SparseSymMatrix` or a dense symmetric array of
    edge weights (diagonal ignored as zero). Runs power iteration on the
    shifted operator ``2I - L_sym`` with per-step deflation against the
    trivial eigenvector ``D^{1/2} 1``; converges when the eigen-residual
    drops below ``tol``.

    Raises :class:`DisconnectedGraphError` for graphs with more than one
    positive-weight component and :class:`ConvergenceError` at the iteration
    cap.
    """
    n, matvec = _affinity_matvec(affinity)
    d = matvec(np.ones(n)) if degrees is None else np.asarray(degrees, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("all degrees must be positive")
    if not is_connected(affinity):
        raise DisconnectedGraphError("affinity graph disconnected")

    inv_sqrt_d = 1.0 / np.sqrt(d)
    z0 = np.sqrt(d)
    z0 /= np.linalg.norm(z0)

    def shifted(x):
        # 2I - L_sym = I + D^{-1/2} E D^{-1/2}
        return x + inv_sqrt_d * matvec(inv_sqrt_d * x)

    rng = np.random.default_rng(_POWER_SEED)
    v = rng.standard_normal(n)
    v -= (v @ z0) * z0
    v /= np.linalg.norm(v)

    residual = np.inf
    for _ in range(max_iter):
        w = shifted(v)
        theta = float(v @ w)
        residual = float(np.linalg.norm(w - theta * v))
        if residual <= tol:
            value = 2.0 - theta
            if v[np.argmax(np.abs(v))] < 0:
                v = -v
            return EigenPair(value, v)
        w -= (w @ z0) * z0
        nw = np.linalg.norm(w)
        if nw == 0.0:
            # start vector annihilated; reseed within the deflated subspace
            w = rng.standard_normal(n)
            w -= (w @ z0) * z0
            nw = np.linalg.norm(w)
        v = w / nw
    raise ConvergenceError("power iteration did not converge", residual)
