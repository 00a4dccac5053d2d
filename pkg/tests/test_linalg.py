import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from microtune.linalg import (
    ConvergenceError,
    DisconnectedGraphError,
    SparseSymMatrix,
    cosine_sim,
    dense_sym_eigen,
    fiedler_vector,
    is_connected,
    row_softmax,
)


def random_connected_graph(rng, n):
    """ER edges over a random spanning tree, continuous weights in [0.2, 1]."""
    rows, cols = [], []
    order = rng.permutation(n)
    for k in range(1, n):
        a = order[k]
        b = order[rng.integers(0, k)]
        rows.append(min(a, b))
        cols.append(max(a, b))
    for i in range(n):
        for j in range(i + 1, n):
            if rng.uniform() < 0.3:
                rows.append(i)
                cols.append(j)
    keys = {}
    for i, j in zip(rows, cols):
        keys[(i, j)] = None
    pairs = sorted(keys)
    weights = rng.uniform(0.2, 1.0, size=len(pairs))
    return SparseSymMatrix(
        n, [p[0] for p in pairs], [p[1] for p in pairs], weights
    )


def normalized_laplacian(graph: SparseSymMatrix) -> np.ndarray:
    e = graph.to_dense()
    d = e.sum(axis=1)
    inv = 1.0 / np.sqrt(d)
    lsym = -e * np.outer(inv, inv)
    np.fill_diagonal(lsym, 1.0)
    return lsym


# --- row_softmax ---------------------------------------------------------------


def test_softmax_equal_logits_uniform():
    assert_allclose(row_softmax(np.zeros(3)), np.full(3, 1 / 3), rtol=0, atol=1e-15)


@pytest.mark.parametrize("x", [-4.0, 0.0, 17.5])
def test_softmax_two_class_analytic(x):
    assert_allclose(row_softmax(np.array([x, x + math.log(3)])), [0.25, 0.75], atol=1e-14)


def test_softmax_high_precision_oracle():
    import mpmath

    mpmath.mp.dps = 50
    logits = [1.2, -0.7, 3.1]
    exps = [mpmath.exp(v) for v in logits]
    total = sum(exps)
    expected = np.array([float(e / total) for e in exps])
    assert_allclose(row_softmax(np.array(logits)), expected, rtol=0, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(
        st.lists(st.floats(-50, 50), min_size=1, max_size=6),
        min_size=1,
        max_size=4,
    ).filter(lambda rows: len({len(r) for r in rows}) == 1)
)
def test_softmax_rows_sum_to_one(rows):
    p = row_softmax(np.array(rows, dtype=np.float64))
    assert np.all(p >= 0)
    assert_allclose(p.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


def test_softmax_rejects_non_finite():
    with pytest.raises(ValueError, match="non-finite logits"):
        row_softmax(np.array([0.0, np.nan]))
    with pytest.raises(ValueError, match="non-finite logits"):
        row_softmax(np.array([np.inf, 1.0]))


# --- cosine_sim -----------------------------------------------------------------


def test_cosine_identical_vectors():
    v = np.array([0.3, -2.0, 1.1])
    assert cosine_sim(v, v) == pytest.approx(1.0, abs=1e-12)


def test_cosine_orthogonal_basis():
    assert cosine_sim(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == pytest.approx(0.0, abs=0)


def test_cosine_matches_direct_formula():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = rng.standard_normal(7)
        b = rng.standard_normal(7)
        expected = float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
        assert cosine_sim(a, b) == pytest.approx(expected, abs=1e-14)
        assert -1.0 <= cosine_sim(a, b) <= 1.0


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(-10, 10), min_size=2, max_size=6),
    st.lists(st.floats(-10, 10), min_size=2, max_size=6),
    st.floats(0.01, 100),
    st.floats(0.01, 100),
)
def test_cosine_symmetric_and_scale_invariant(a, b, alpha, beta):
    n = min(len(a), len(b))
    a = np.array(a[:n])
    b = np.array(b[:n])
    if np.linalg.norm(a) < 1e-6 or np.linalg.norm(b) < 1e-6:
        return
    assert cosine_sim(a, b) == pytest.approx(cosine_sim(b, a), abs=1e-12)
    assert cosine_sim(alpha * a, beta * b) == pytest.approx(cosine_sim(a, b), abs=1e-12)


def test_cosine_zero_norm_rejected():
    with pytest.raises(ValueError, match="degenerate embedding"):
        cosine_sim(np.zeros(3), np.ones(3))


# --- dense_sym_eigen ---------------------------------------------------------------


def test_dense_eigen_identity():
    pairs = dense_sym_eigen(np.eye(3))
    assert_allclose([p.value for p in pairs], [1.0, 1.0, 1.0], atol=1e-14)


def test_dense_eigen_diagonal():
    pairs = dense_sym_eigen(np.diag([2.0, 5.0]))
    assert pairs[0].value == pytest.approx(2.0, abs=1e-14)
    assert pairs[1].value == pytest.approx(5.0, abs=1e-14)
    assert abs(pairs[0].vector[0]) == pytest.approx(1.0, abs=1e-14)
    assert abs(pairs[1].vector[1]) == pytest.approx(1.0, abs=1e-14)


def test_dense_eigen_path_graph_laplacian():
    # characteristic polynomial -lambda (lambda - 1)(lambda - 3)
    laplacian = np.array([[1.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 1.0]])
    values = [p.value for p in dense_sym_eigen(laplacian)]
    assert_allclose(values, [0.0, 1.0, 3.0], atol=1e-12)


def test_dense_eigen_reconstruction_and_orthogonality():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((12, 12))
    m = (a + a.T) / 2
    pairs = dense_sym_eigen(m)
    vectors = np.stack([p.vector for p in pairs], axis=1)
    values = np.array([p.value for p in pairs])
    assert np.all(np.diff(values) >= -1e-12)
    assert_allclose(vectors.T @ vectors, np.eye(12), atol=1e-10)
    recon = (vectors * values) @ vectors.T
    assert np.linalg.norm(m - recon) <= 1e-8 * np.linalg.norm(m)


def test_dense_eigen_rejects_asymmetric():
    m = np.array([[1.0, 2.0], [0.0, 1.0]])
    with pytest.raises(ValueError, match="asymmetric"):
        dense_sym_eigen(m)


# --- fiedler_vector ------------------------------------------------------------------


def test_fiedler_two_node_graph():
    graph = SparseSymMatrix(2, [0], [1], [1.0])
    pair = fiedler_vector(graph)
    assert pair.value == pytest.approx(2.0, abs=1e-10)
    target = np.array([1.0, -1.0]) / math.sqrt(2)
    assert abs(np.dot(pair.vector, target)) == pytest.approx(1.0, abs=1e-10)
    # sign convention: the largest-magnitude entry is positive
    assert pair.vector[np.argmax(np.abs(pair.vector))] > 0


def test_fiedler_complete_graph_k3():
    graph = SparseSymMatrix(3, [0, 0, 1], [1, 2, 2], [1.0, 1.0, 1.0])
    pair = fiedler_vector(graph)
    assert pair.value == pytest.approx(1.5, abs=1e-9)
    z0 = np.sqrt(graph.degrees())
    z0 /= np.linalg.norm(z0)
    assert abs(np.dot(pair.vector, z0)) <= 1e-8


def test_fiedler_matches_dense_oracle_50_nodes():
    rng = np.random.default_rng(11)
    graph = random_connected_graph(rng, 50)
    pair = fiedler_vector(graph)
    oracle = dense_sym_eigen(normalized_laplacian(graph))[1]
    assert abs(pair.value - oracle.value) <= 1e-8
    assert abs(np.dot(pair.vector, oracle.vector)) >= 1.0 - 1e-6


@pytest.mark.parametrize("trial", range(40))
def test_fiedler_oracle_agreement_random_graphs(trial):
    rng = np.random.default_rng(1000 + trial)
    n = int(rng.integers(2, 65))
    graph = random_connected_graph(rng, n)
    pair = fiedler_vector(graph)
    lsym = normalized_laplacian(graph)
    oracle = dense_sym_eigen(lsym)[1]
    assert abs(pair.value - oracle.value) <= 1e-8
    assert abs(np.dot(pair.vector, oracle.vector)) >= 1.0 - 1e-6
    # residual and trivial-direction orthogonality contracts
    z0 = np.sqrt(graph.degrees())
    z0 /= np.linalg.norm(z0)
    assert abs(np.dot(pair.vector, z0)) <= 1e-8
    assert np.linalg.norm(lsym @ pair.vector - pair.value * pair.vector) <= 1e-8


def test_fiedler_rejects_disconnected_graph():
    graph = SparseSymMatrix(4, [0, 2], [1, 3], [1.0, 1.0])
    assert not is_connected(graph)
    with pytest.raises(DisconnectedGraphError, match="affinity graph disconnected"):
        fiedler_vector(graph)


def test_fiedler_rejects_nonpositive_degrees():
    graph = SparseSymMatrix(3, [0], [1], [1.0])
    with pytest.raises(ValueError, match="degrees"):
        fiedler_vector(graph, degrees=np.array([1.0, 1.0, 0.0]))


def test_fiedler_convergence_error_carries_residual():
    rng = np.random.default_rng(5)
    graph = random_connected_graph(rng, 30)
    with pytest.raises(ConvergenceError) as err:
        fiedler_vector(graph, tol=1e-30, max_iter=3)
    assert err.value.residual > 0


def test_sparse_matrix_contract_checks():
    with pytest.raises(ValueError, match="i <= j"):
        SparseSymMatrix(3, [1], [0], [1.0])
    with pytest.raises(ValueError, match="duplicate"):
        SparseSymMatrix(3, [0, 0], [1, 1], [1.0, 2.0])
    with pytest.raises(ValueError, match="nonnegative"):
        SparseSymMatrix(3, [0], [1], [-1.0])
    with pytest.raises(ValueError, match="dim"):
        SparseSymMatrix(1, [], [], [])


def test_sparse_matvec_matches_dense():
    rng = np.random.default_rng(8)
    graph = random_connected_graph(rng, 17)
    x = rng.standard_normal(17)
    assert_allclose(graph.matvec(x), graph.to_dense() @ x, atol=1e-12)
