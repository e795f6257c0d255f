import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smrlnn import _fallback, _backend
from smrlnn.errors import DimensionError, NotPositiveDefiniteError
from smrlnn.linalg import as_matrix, chol_solve, covariance, inv_sqrt, svd_values, sym_eig


def brute_cov(a, b):
    n, p = a.shape
    q = b.shape[1]
    abar = [sum(a[i, j] for i in range(n)) / n for j in range(p)]
    bbar = [sum(b[i, k] for i in range(n)) / n for k in range(q)]
    out = np.zeros((p, q))
    for j in range(p):
        for k in range(q):
            out[j, k] = sum((a[i, j] - abar[j]) * (b[i, k] - bbar[k]) for i in range(n)) / n
    return out


def random_orthogonal(rng, n):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


class TestCovariance:
    def test_two_point(self):
        a = np.array([[1.0, 0.0], [-1.0, 0.0]])
        np.testing.assert_array_equal(covariance(a, a), [[1.0, 0.0], [0.0, 0.0]])

    def test_matches_loop(self, rng):
        a = rng.standard_normal((5, 3))
        np.testing.assert_allclose(covariance(a, a), brute_cov(a, a), atol=1e-14)
        b = rng.standard_normal((5, 2))
        np.testing.assert_allclose(covariance(a, b), brute_cov(a, b), atol=1e-14)

    def test_constant_is_zero(self):
        a = np.full((4, 3), 2.5)
        np.testing.assert_array_equal(covariance(a, a), np.zeros((3, 3)))

    def test_errors(self):
        with pytest.raises(DimensionError):
            covariance(np.ones((3, 2)), np.ones((4, 2)))
        with pytest.raises(DimensionError):
            covariance(np.ones((1, 2)), np.ones((1, 2)))

    def test_psd(self, rng, backend):
        for _ in range(100):
            a = rng.standard_normal((rng.integers(2, 12), rng.integers(1, 6)))
            assert sym_eig(covariance(a, a)).eigenvalues.min() >= -1e-10


class TestCholSolve:
    def test_identity(self, rng, backend):
        b = rng.standard_normal((3, 4))
        np.testing.assert_allclose(chol_solve(np.eye(3), b), b, atol=1e-15)

    def test_diagonal(self, backend):
        x = chol_solve(np.diag([4.0, 9.0]), np.eye(2))
        np.testing.assert_allclose(x, [[0.25, 0.0], [0.0, 1 / 9]], rtol=1e-15)

    def test_round_trip(self, rng, backend):
        for _ in range(20):
            p = int(rng.integers(1, 30))
            m = rng.standard_normal((p, p))
            s = m @ m.T + np.eye(p)
            b = rng.standard_normal((p, 3))
            x = chol_solve(s, b)
            assert np.linalg.norm(s @ x - b) <= 1e-9 * np.linalg.norm(b)

    def test_vector_rhs(self, backend):
        np.testing.assert_allclose(chol_solve(np.diag([2.0, 4.0]), [1.0, 1.0]), [0.5, 0.25])

    def test_not_spd_reports_pivot(self, backend):
        s = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 2.0], [0.0, 2.0, 1.0]])
        with pytest.raises(NotPositiveDefiniteError) as info:
            chol_solve(s, np.eye(3))
        assert info.value.pivot == 2


class TestSymEig:
    def test_diagonal(self, backend):
        res = sym_eig(np.diag([2.0, 3.0]))
        np.testing.assert_array_equal(res.eigenvalues, [3.0, 2.0])
        np.testing.assert_allclose(np.abs(res.eigenvectors), [[0, 1], [1, 0]])

    def test_permutation(self, backend):
        res = sym_eig(np.array([[0.0, 1.0], [1.0, 0.0]]))
        np.testing.assert_allclose(res.eigenvalues, [1.0, -1.0], atol=1e-15)

    def test_tie_order_keeps_original_index(self, backend):
        res = sym_eig(np.diag([1.0, 5.0, 1.0]))
        np.testing.assert_array_equal(res.eigenvalues, [5.0, 1.0, 1.0])
        np.testing.assert_array_equal(np.abs(res.eigenvectors), [[0, 1, 0], [1, 0, 0], [0, 0, 1]])

    @pytest.mark.parametrize("n", [1, 2, 10, 40])
    def test_invariants(self, rng, backend, n):
        m = rng.standard_normal((n, n))
        s = m + m.T
        res = sym_eig(s)
        lam, v = res.eigenvalues, res.eigenvectors
        fro = np.linalg.norm(s)
        assert np.all(np.diff(lam) <= 0)
        for i in range(n):
            assert np.linalg.norm(s @ v[:, i] - lam[i] * v[:, i]) <= 1e-10 * fro
        np.testing.assert_allclose(v.T @ v, np.eye(n), atol=1e-10)
        np.testing.assert_allclose((v * lam) @ v.T, s, atol=1e-9)
        assert abs(lam.sum() - np.trace(s)) <= 1e-9 * fro
        np.testing.assert_allclose(lam, np.linalg.eigvalsh(s)[::-1], atol=1e-10 * fro)

    def test_rejects_nonsquare(self):
        with pytest.raises(DimensionError):
            sym_eig(np.ones((2, 3)))

    def test_rejects_asymmetric(self):
        with pytest.raises(DimensionError):
            sym_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))


class TestSvdValues:
    def test_identity(self, backend):
        np.testing.assert_allclose(svd_values(np.eye(3)), [1, 1, 1])

    def test_signed_diagonal(self, backend):
        np.testing.assert_allclose(svd_values(np.diag([3.0, -4.0])), [4.0, 3.0])

    def test_gram_oracle(self, rng, backend):
        t = rng.standard_normal((4, 6))
        s = svd_values(t)
        assert s.shape == (4,)
        np.testing.assert_allclose(s ** 2, np.linalg.eigvalsh(t @ t.T)[::-1], atol=1e-10)
        np.testing.assert_allclose(s, np.linalg.svd(t, compute_uv=False), atol=1e-10)

    def test_orthogonal_invariance(self, rng, backend):
        for _ in range(10):
            p, q = rng.integers(1, 7, size=2)
            t = rng.standard_normal((p, q))
            u, v = random_orthogonal(rng, p), random_orthogonal(rng, q)
            np.testing.assert_allclose(svd_values(u @ t @ v), svd_values(t), atol=1e-9)


def test_inv_sqrt(rng, backend):
    m = rng.standard_normal((5, 5))
    s = m @ m.T
    w = inv_sqrt(s, ridge=0.1)
    np.testing.assert_allclose(w @ (s + 0.1 * np.eye(5)) @ w, np.eye(5), atol=1e-10)
    np.testing.assert_allclose(w, w.T, atol=1e-14)


def test_as_matrix_rejects_nonfinite():
    with pytest.raises(ValueError):
        as_matrix([[1.0, np.nan]])
    with pytest.raises(ValueError):
        as_matrix([[np.inf]])
    assert as_matrix([1.0, 2.0]).shape == (2, 1)


@pytest.mark.skipif(not _backend.COMPILED, reason="extension not built")
def test_compiled_matches_fallback(rng):
    comp = _backend.compiled
    for n in (1, 3, 17):
        m = rng.standard_normal((n, n))
        s = np.ascontiguousarray(m + m.T)
        w1, v1, _ = comp.jacobi_eigh(s)
        w2, v2, _ = _fallback.jacobi_eigh(s)
        np.testing.assert_allclose(np.sort(w1), np.sort(w2), atol=1e-12)
        spd = np.ascontiguousarray(m @ m.T + np.eye(n))
        np.testing.assert_allclose(comp.cholesky(spd), _fallback.cholesky(spd), atol=1e-12)
        b = np.ascontiguousarray(rng.standard_normal((n, 2)))
        l = comp.cholesky(spd)
        np.testing.assert_allclose(comp.cho_solve_factored(l, b), _fallback.cho_solve_factored(l, b), atol=1e-10)
    pt, pc = rng.random(7), rng.random(12)
    order = np.argsort(-pt, kind="stable").astype(np.int64)
    np.testing.assert_array_equal(comp.greedy_match(pt, pc, order), _fallback.greedy_match(pt, pc, order))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_eig_sum_equals_trace(n, seed):
    m = np.random.default_rng(seed).standard_normal((n, n))
    s = m + m.T
    lam = sym_eig(s).eigenvalues
    assert abs(lam.sum() - np.trace(s)) <= 1e-9 * max(np.linalg.norm(s), 1e-300)
