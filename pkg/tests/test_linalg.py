import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from federa.errors import ConfigError, SvdConvergenceError
from federa import linalg
from federa.linalg import (
    column_l2_norms,
    cosine_similarity,
    frobenius_norm,
    gaussian_matrix,
    make_rng,
    matmul,
    svd,
    truncated_svd,
)


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for t in range(a.shape[1]):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def test_matmul_identity():
    w = make_rng(1, "t").standard_normal((3, 4))
    assert np.array_equal(matmul(np.eye(3), w), w)


def test_matmul_small():
    assert matmul([[1, 2], [3, 4]], [[0], [1]]).tolist() == [[2.0], [4.0]]


def test_matmul_matches_triple_loop():
    rng = make_rng(2, "t")
    a, b = rng.standard_normal((8, 8)), rng.standard_normal((8, 8))
    np.testing.assert_allclose(matmul(a, b), naive_matmul(a, b), rtol=1e-13, atol=1e-13)


def test_matmul_dimension_mismatch():
    with pytest.raises(ConfigError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_associative():
    rng = make_rng(3, "t")
    for _ in range(10):
        a, b, c = rng.standard_normal((5, 7)), rng.standard_normal((7, 4)), rng.standard_normal((4, 6))
        left, right = matmul(matmul(a, b), c), matmul(a, matmul(b, c))
        assert frobenius_norm(left - right) / frobenius_norm(left) < 1e-9


def test_svd_diagonal():
    res = svd(np.diag([3.0, 2.0, 1.0]))
    assert res.sigma.tolist() == [3.0, 2.0, 1.0]
    np.testing.assert_array_equal(res.u, np.eye(3))
    np.testing.assert_array_equal(res.v_rows, np.eye(3))


def test_svd_permuted_diagonal():
    res = svd(np.array([[0.0, 2.0], [1.0, 0.0]]))
    np.testing.assert_allclose(res.sigma, [2.0, 1.0], atol=1e-15)


@pytest.mark.parametrize("shape", [(8, 8), (64, 48), (48, 64), (1, 16), (16, 1)])
def test_svd_invariants(shape):
    w = make_rng(4, "svd", client=shape[0] * 100 + shape[1]).standard_normal(shape)
    res = svd(w)
    p = min(shape)
    assert res.u.shape == (shape[0], p) and res.v_rows.shape == (p, shape[1])
    assert np.all(res.sigma >= 0) and np.all(np.diff(res.sigma) <= 0)
    assert np.abs(res.u.T @ res.u - np.eye(p)).max() < 1e-10
    assert np.abs(res.v_rows @ res.v_rows.T - np.eye(p)).max() < 1e-10
    assert frobenius_norm(w - res.reconstruct()) / frobenius_norm(w) < 1e-10
    # LAPACK as an independent oracle for the spectrum
    np.testing.assert_allclose(res.sigma, np.linalg.svd(w, compute_uv=False), rtol=1e-10, atol=1e-12)


def test_svd_transpose_has_same_spectrum():
    w = make_rng(5, "t").standard_normal((20, 13))
    np.testing.assert_allclose(svd(w).sigma, svd(w.T).sigma, atol=1e-10)


def test_svd_rank_deficient_keeps_orthonormal_u():
    w = np.zeros((6, 4))
    w[:, 0] = np.arange(6.0)
    w[:, 2] = 2 * np.arange(6.0)
    res = svd(w)
    assert np.abs(res.u.T @ res.u - np.eye(4)).max() < 1e-10
    assert frobenius_norm(w - res.reconstruct()) < 1e-12
    np.testing.assert_allclose(res.sigma[1:], 0.0, atol=1e-12)


def test_svd_zero_matrix():
    res = svd(np.zeros((3, 2)))
    assert res.sigma.tolist() == [0.0, 0.0]
    assert np.abs(res.u.T @ res.u - np.eye(2)).max() < 1e-12


def test_svd_rejects_nonfinite():
    with pytest.raises(ConfigError):
        svd(np.array([[np.nan, 1.0]]))


def test_svd_non_convergence_names_matrix(monkeypatch):
    monkeypatch.setattr(linalg, "SVD_MAX_SWEEPS", 1)
    w = make_rng(6, "t").standard_normal((10, 10))
    with pytest.raises(SvdConvergenceError, match="layer.7"):
        svd(w, name="layer.7")


def test_truncated_svd_matches_lapack():
    w = make_rng(7, "t").standard_normal((12, 9))
    u, s, vt = np.linalg.svd(w, full_matrices=False)
    np.testing.assert_allclose(truncated_svd(w, 3), (u[:, :3] * s[:3]) @ vt[:3], atol=1e-12)


@pytest.mark.parametrize(
    "w, expected",
    [(np.eye(3), [1.0, 1.0, 1.0]), (np.array([[3.0], [4.0]]), [5.0]), (np.zeros((2, 3)), [0.0, 0.0, 0.0])],
)
def test_column_l2_norms(w, expected):
    assert column_l2_norms(w).tolist() == expected


def test_cosine_similarity_conventions():
    e1 = np.array([1.0, 0.0])
    assert cosine_similarity(e1, e1) == 1.0
    assert cosine_similarity(e1, -e1) == -1.0
    assert cosine_similarity(np.zeros(2), np.zeros(2)) == 1.0
    assert cosine_similarity(np.zeros(2), e1) == 0.0


@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3))
def test_cosine_bounded(u, v):
    c = cosine_similarity(u, v)
    assert -1.0 <= c <= 1.0


def test_frobenius_norm():
    assert frobenius_norm(np.eye(2)) == pytest.approx(np.sqrt(2), abs=1e-15)
    assert frobenius_norm([[3.0, 4.0]]) == 5.0
    assert frobenius_norm(np.zeros((3, 3))) == 0.0


def test_gaussian_matrix_statistics():
    g = gaussian_matrix(make_rng(8, "gauss"), 100, 1000, 1.0)
    assert abs(g.mean()) < 0.02
    assert abs(g.std() - 1.0) < 0.02


def test_gaussian_matrix_deterministic_and_degenerate():
    a = gaussian_matrix(make_rng(9, "g", 1, 2), 4, 5, 0.5)
    b = gaussian_matrix(make_rng(9, "g", 1, 2), 4, 5, 0.5)
    assert a.tobytes() == b.tobytes()
    assert gaussian_matrix(make_rng(9, "g"), 0, 5, 1.0).shape == (0, 5)
    with pytest.raises(ConfigError):
        gaussian_matrix(make_rng(9, "g"), 2, 2, 0.0)


def test_rng_streams_are_keyed():
    base = make_rng(10, "purpose", 3, 4).random(4)
    assert np.array_equal(base, make_rng(10, "purpose", 3, 4).random(4))
    for other in (make_rng(11, "purpose", 3, 4), make_rng(10, "other", 3, 4), make_rng(10, "purpose", 2, 4), make_rng(10, "purpose", 3, 5)):
        assert not np.array_equal(base, other.random(4))


def test_rng_known_first_draw():
    # frozen values: the derivation must not drift across platforms or releases
    assert make_rng(0, "default").integers(0, 2**32) == 1336849804
    assert make_rng(42, "local-train", 3, 7).integers(0, 2**32) == 333043264


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_svd_roundtrip_property(d, k, seed):
    w = make_rng(seed, "prop").standard_normal((d, k))
    res = svd(w)
    assert frobenius_norm(w - res.reconstruct()) <= 1e-10 * max(frobenius_norm(w), 1e-300)
