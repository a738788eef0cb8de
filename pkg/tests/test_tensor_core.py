import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from byomkit import tensor_core as tc
from byomkit.errors import (
    EmptyInput,
    InnerDimMismatch,
    KeyMismatch,
    NonFiniteValue,
    NotAMatrix,
    RankOutOfRange,
    RatioOutOfRange,
    ShapeMismatch,
)


def sort_oracle(values, keep_ratio):
    flat = np.asarray(values).ravel()
    k = math.ceil(round(keep_ratio * flat.size, 9))
    order = sorted(range(flat.size), key=lambda i: (-abs(float(flat[i])), i))
    return sorted(order[: max(k, 1)])


# --- axpy ---


def test_axpy_zero_alpha_returns_y():
    y = {"w": np.array([3.0, 4.0], np.float32)}
    out = tc.elementwise_axpy(0.0, {"w": np.array([9.0, -9.0], np.float32)}, y)
    np.testing.assert_array_equal(out["w"], y["w"])


def test_axpy_direct_addition():
    out = tc.elementwise_axpy(1.0, {"w": np.array([1, 2], np.float32)}, {"w": np.array([3, 4], np.float32)})
    np.testing.assert_array_equal(out["w"], [4, 6])


def test_axpy_scaled():
    out = tc.elementwise_axpy(0.3, {"w": np.array([10, -10], np.float32)}, {"w": np.array([1, 1], np.float32)})
    np.testing.assert_allclose(out["w"], [4, -2], rtol=1e-6)
    assert out["w"].dtype == np.float32


def test_axpy_rejects_mismatch():
    with pytest.raises(KeyMismatch):
        tc.elementwise_axpy(1.0, {"a": np.zeros(2)}, {"b": np.zeros(2)})
    with pytest.raises(ShapeMismatch):
        tc.elementwise_axpy(1.0, {"a": np.zeros(2)}, {"a": np.zeros(3)})


def test_axpy_overflow_is_non_finite():
    big = {"w": np.array([3e38], np.float32)}
    with pytest.raises(NonFiniteValue):
        tc.elementwise_axpy(10.0, big, big)


# --- top-k ---


def test_top_k_example():
    assert tc.top_k_by_magnitude(np.array([3, -1, 0.5, -4]), 0.5).indices.tolist() == [0, 3]


def test_top_k_keep_all():
    sel = tc.top_k_by_magnitude(np.array([0.0, 5, -2]), 1.0)
    assert sel.indices.tolist() == [0, 1, 2] and sel.count == 3


def test_top_k_ties_prefer_lower_index():
    assert tc.top_k_by_magnitude(np.array([2, -2, 2, -2]), 0.5).indices.tolist() == [0, 1]


@pytest.mark.parametrize("ratio,n,want", [(0.1, 30, 3), (0.1, 31, 4), (0.01, 1, 1), (1.0, 7, 7), (0.5, 3, 2)])
def test_keep_count_is_ceil(ratio, n, want):
    assert tc.keep_count(ratio, n) == want


@pytest.mark.parametrize("ratio", [0.0, -0.1, 1.01, float("nan")])
def test_keep_ratio_out_of_range(ratio):
    with pytest.raises(RatioOutOfRange):
        tc.top_k_by_magnitude(np.ones(4), ratio)


def test_top_k_empty_and_nan():
    with pytest.raises(EmptyInput):
        tc.top_k_by_magnitude(np.zeros(0), 0.5)
    with pytest.raises(NonFiniteValue):
        tc.top_k_by_magnitude(np.array([1.0, np.nan]), 0.5)


@settings(max_examples=200, deadline=None)
@given(
    values=arrays(np.float32, st.integers(1, 300), elements=st.sampled_from([0.0, 1.0, -1.0, 2.5, -2.5, 7.0, 1e-3])),
    ratio=st.floats(0.001, 1.0),
)
def test_top_k_matches_sort_oracle(values, ratio):
    sel = tc.top_k_by_magnitude(values, ratio)
    assert sel.indices.tolist() == sort_oracle(values, ratio)
    assert sel.count == len(sel.indices)
    assert np.all(np.diff(sel.indices) > 0)


# --- flat layout ---


def test_concat_and_split_roundtrip():
    tmap = {"a": np.arange(6.0).reshape(2, 3), "b": np.arange(4.0)}
    flat, layout = tc.concat_flat(tmap)
    assert layout == [("a", 0, 6), ("b", 6, 10)]
    parts = tc.split_indices(np.array([1, 5, 6, 9]), layout)
    assert parts["a"].tolist() == [1, 5] and parts["b"].tolist() == [0, 3]
    assert parts["a"].dtype == np.uint64


# --- SVD ---


def test_svd_identity():
    res = tc.svd_thin(np.eye(3))
    np.testing.assert_allclose(res.s, [1, 1, 1], atol=1e-12)


def test_svd_diagonal_is_permuted_identity():
    res = tc.svd_thin(np.diag([1.0, 3.0, 2.0]))
    np.testing.assert_allclose(res.s, [3, 2, 1], atol=1e-12)
    np.testing.assert_allclose(np.abs(res.u), np.eye(3)[:, [1, 2, 0]], atol=1e-12)
    np.testing.assert_allclose(np.abs(res.v), np.eye(3)[:, [1, 2, 0]], atol=1e-12)


def test_svd_rank_one_hand_case():
    res = tc.svd_thin(np.array([[1.0, 1.0], [0.0, 0.0]]))
    np.testing.assert_allclose(res.s, [math.sqrt(2), 0.0], atol=1e-12)
    np.testing.assert_allclose(res.u.T @ res.u, np.eye(2), atol=1e-12)
    np.testing.assert_allclose(res.reconstruct(), [[1, 1], [0, 0]], atol=1e-12)


def test_svd_rejects_bad_input():
    with pytest.raises(NotAMatrix):
        tc.svd_thin(np.zeros(3))
    with pytest.raises(EmptyInput):
        tc.svd_thin(np.zeros((0, 3)))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_svd_invariants(n, m, seed):
    a = np.random.default_rng(seed).standard_normal((n, m))
    res = tc.svd_thin(a)
    k = min(n, m)
    assert res.u.shape == (n, k) and res.v.shape == (m, k)
    assert np.all(np.diff(res.s) <= 0) and np.all(res.s >= 0)
    np.testing.assert_allclose(res.u.T @ res.u, np.eye(k), atol=1e-6)
    np.testing.assert_allclose(res.v.T @ res.v, np.eye(k), atol=1e-6)
    assert np.linalg.norm(res.reconstruct() - a) <= 1e-5 * np.linalg.norm(a)
    eig = np.sqrt(np.clip(np.sort(np.linalg.eigvalsh(a.T @ a))[::-1][:k], 0, None))
    np.testing.assert_allclose(res.s, eig, rtol=1e-5, atol=1e-6)


def test_svd_sign_convention_and_determinism(rng):
    a = rng.standard_normal((7, 4))
    r1, r2 = tc.svd_thin(a), tc.svd_thin(a.copy())
    assert np.array_equal(r1.u, r2.u) and np.array_equal(r1.s, r2.s)
    for j in range(4):
        col = r1.u[:, j]
        assert col[np.flatnonzero(np.abs(col) > 1e-9)[0]] > 0


def test_svd_rank_deficient_keeps_orthonormal_u():
    a = np.outer(np.arange(1.0, 6.0), np.ones(4))
    res = tc.svd_thin(a)
    np.testing.assert_allclose(res.u.T @ res.u, np.eye(4), atol=1e-10)
    np.testing.assert_allclose(res.reconstruct(), a, atol=1e-10)


def test_truncated_product_hand_case():
    res = tc.truncated_svd_of_product(np.array([[1.0], [0.0]]), np.array([[2.0], [0.0]]), 1)
    np.testing.assert_allclose(res.s, [2.0])
    np.testing.assert_allclose(res.reconstruct(), [[2, 0], [0, 0]], atol=1e-12)


def test_truncated_product_full_rank_is_lossless(rng):
    a, b = rng.standard_normal((10, 4)), rng.standard_normal((7, 4))
    res = tc.truncated_svd_of_product(a, b, 4)
    assert np.linalg.norm(res.reconstruct() - a @ b.T) <= 1e-5 * np.linalg.norm(a @ b.T)


def test_truncated_product_matches_materialized_oracle(rng):
    a, b = rng.standard_normal((8, 3)), rng.standard_normal((8, 3))
    prod = a @ b.T
    ours = np.linalg.norm(tc.truncated_svd_of_product(a, b, 2).reconstruct() - prod)
    oracle = np.linalg.norm(tc.svd_thin(prod).truncate(2).reconstruct() - prod)
    u, s, vt = np.linalg.svd(prod)
    lapack = np.linalg.norm((u[:, :2] * s[:2]) @ vt[:2] - prod)
    assert abs(ours - oracle) <= 1e-6 and abs(ours - lapack) <= 1e-6


def test_truncated_product_rank_checks(rng):
    a, b = rng.standard_normal((5, 3)), rng.standard_normal((4, 3))
    for q in (0, 4):
        with pytest.raises(RankOutOfRange):
            tc.truncated_svd_of_product(a, b, q)
    with pytest.raises(InnerDimMismatch):
        tc.truncated_svd_of_product(a, rng.standard_normal((4, 2)), 1)
    with pytest.raises(RankOutOfRange):
        tc.truncated_svd_of_product(rng.standard_normal((2, 3)), rng.standard_normal((5, 3)), 3)


def test_eckart_young_against_random_factorizations(rng):
    for _ in range(5):
        n, m = rng.integers(2, 17, size=2)
        a = rng.standard_normal((n, m))
        q = int(rng.integers(1, min(n, m) + 1))
        best = np.linalg.norm(tc.svd_thin(a).truncate(q).reconstruct() - a)
        for _ in range(1000):
            x, y = rng.standard_normal((n, q)), rng.standard_normal((m, q))
            assert best <= np.linalg.norm(x @ y.T - a) + 1e-9


def test_map_parallel_order_and_thread_cap(monkeypatch):
    monkeypatch.setenv("BYOM_THREADS", "3")
    assert tc.worker_count() == 3
    assert tc.map_parallel(lambda x: x * x, range(20)) == [x * x for x in range(20)]
    monkeypatch.setenv("BYOM_THREADS", "0")
    assert tc.worker_count() >= 1
