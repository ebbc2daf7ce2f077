import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_spd, random_sym
from spdnet_psi.errors import (
    DimMismatchError,
    InvalidInputError,
    NotRepairableError,
    NotSPDError,
    SpdOverflowError,
)
from spdnet_psi.spd import (
    as_spd,
    ensure_spd,
    is_spd,
    logeuclid_dist,
    loewner_matrix,
    spd_exp,
    spd_log,
    sym_eig,
    sym_unvectorize,
    sym_vectorize,
    sym_vectorize_adjoint,
    symmetrize,
)


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


class TestSymEig:
    def test_identity(self):
        w, U = sym_eig(np.eye(3))
        np.testing.assert_allclose(w, 1.0)
        np.testing.assert_allclose(U.T @ U, np.eye(3), atol=1e-14)

    def test_diag_sorted_descending(self):
        w, U = sym_eig(np.diag([1.0, 3.0]))
        np.testing.assert_array_equal(w, [3.0, 1.0])
        np.testing.assert_allclose(np.abs(U), [[0, 1], [1, 0]])

    def test_reconstruction(self, rng):
        for _ in range(50):
            S = random_sym(rng, 9)
            w, U = sym_eig(S)
            assert np.all(np.diff(w) <= 0)
            assert np.linalg.norm(U.T @ U - np.eye(9)) < 1e-10
            assert rel((U * w) @ U.T, S) < 1e-10

    def test_nonfinite(self):
        with pytest.raises(InvalidInputError):
            sym_eig(np.array([[1.0, np.nan], [np.nan, 1.0]]))

    def test_symmetrize_exact(self, rng):
        S = symmetrize(rng.standard_normal((5, 5)))
        assert np.array_equal(S, S.T)


class TestLogExp:
    def test_log_identity(self):
        np.testing.assert_array_equal(spd_log(np.eye(4)), np.zeros((4, 4)))

    def test_log_diag(self):
        np.testing.assert_allclose(spd_log(np.diag([np.e, np.e**2])), np.diag([1.0, 2.0]), atol=1e-14)

    def test_exp_zero(self):
        np.testing.assert_array_equal(spd_exp(np.zeros((3, 3))), np.eye(3))

    def test_exp_diag(self):
        np.testing.assert_allclose(spd_exp(np.diag([1.0, 2.0])), np.diag([np.e, np.e**2]), rtol=1e-14)

    def test_log_rejects_non_spd(self):
        with pytest.raises(NotSPDError):
            spd_log(np.diag([1.0, 0.0]))
        with pytest.raises(NotSPDError):
            spd_log(np.diag([1.0, -1.0]))

    def test_exp_overflow(self):
        with pytest.raises(SpdOverflowError):
            spd_exp(np.diag([1.0, 800.0]))

    def test_round_trips(self, rng):
        for _ in range(100):
            n = int(rng.integers(2, 33))
            S = random_spd(rng, n, cond=10 ** rng.uniform(0, 6))
            assert rel(spd_exp(spd_log(S)), S) < 1e-10
            A = random_sym(rng, n)
            assert rel(spd_log(spd_exp(A)), A) < 1e-10


class TestDistance:
    def test_self_distance(self, rng):
        S = random_spd(rng, 5)
        assert logeuclid_dist(S, S) == 0.0

    def test_scaled_identity(self):
        assert abs(logeuclid_dist(np.eye(4), np.e * np.eye(4)) - 2.0) < 1e-12
        a, b = 3.0, 0.2
        assert abs(logeuclid_dist(a * np.eye(5), b * np.eye(5)) - np.sqrt(5) * abs(np.log(a / b))) < 1e-12

    def test_symmetric_exactly(self, rng):
        S1, S2 = random_spd(rng, 6), random_spd(rng, 6)
        assert logeuclid_dist(S1, S2) == logeuclid_dist(S2, S1)

    def test_dim_mismatch(self):
        with pytest.raises(DimMismatchError):
            logeuclid_dist(np.eye(3), np.eye(4))

    def test_triangle(self, rng):
        for _ in range(200):
            n = int(rng.integers(3, 19))
            A, B, C = (random_spd(rng, n) for _ in range(3))
            dab, dbc, dac = logeuclid_dist(A, B), logeuclid_dist(B, C), logeuclid_dist(A, C)
            assert dac <= dab + dbc + 1e-12
            assert dab > 0


class TestVectorize:
    def test_length_45(self, rng):
        assert sym_vectorize(random_sym(rng, 9)).shape == (45,)

    def test_identity2(self):
        np.testing.assert_array_equal(sym_vectorize(np.eye(2)), [1.0, 0.0, 1.0])

    def test_row_major_upper(self):
        S = np.array([[1.0, 2.0, 3.0], [2.0, 4.0, 5.0], [3.0, 5.0, 6.0]])
        r2 = np.sqrt(2)
        np.testing.assert_allclose(sym_vectorize(S), [1, 2 * r2, 3 * r2, 4, 5 * r2, 6])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 12), st.integers(0, 2**32 - 1))
    def test_isometry(self, n, seed):
        r = np.random.default_rng(seed)
        A, B = random_sym(r, n), random_sym(r, n)
        assert abs(sym_vectorize(A) @ sym_vectorize(B) - np.sum(A * B)) < 1e-12 * (1 + np.abs(A).sum() * np.abs(B).sum())
        assert abs(np.linalg.norm(sym_vectorize(A)) - np.linalg.norm(A)) < 1e-12 * (1 + np.linalg.norm(A))
        np.testing.assert_allclose(sym_unvectorize(sym_vectorize(A)), A, atol=1e-14)

    def test_adjoint(self, rng):
        n = 6
        g = rng.standard_normal(n * (n + 1) // 2)
        dS = random_sym(rng, n)
        assert abs(g @ sym_vectorize(dS) - np.sum(sym_vectorize_adjoint(g, n) * dS)) < 1e-12

    def test_unvectorize_bad_length(self):
        with pytest.raises(DimMismatchError):
            sym_unvectorize(np.zeros(5))


class TestLoewner:
    def test_repeated(self):
        L = loewner_matrix(np.array([2.0, 2.0]), np.log, lambda s: 1 / s)
        np.testing.assert_allclose(L, 0.5)

    def test_distinct(self):
        L = loewner_matrix(np.array([np.e, 1.0]), np.log, lambda s: 1 / s)
        assert abs(L[0, 1] - 1 / (np.e - 1)) < 1e-15
        assert L[0, 1] == L[1, 0]

    def test_near_coincident(self):
        s = np.array([3.0, 3.0 + 1e-9])
        L = loewner_matrix(s, np.log, lambda x: 1 / x)
        assert abs(L[0, 1] - 1 / 3.0) < 1e-6

    def test_nonfinite(self):
        with pytest.raises(InvalidInputError):
            loewner_matrix(np.array([1.0, np.inf]), np.log, lambda s: 1 / s)


class TestEnsureSpd:
    def test_unchanged(self, rng):
        S = random_spd(rng, 4)
        out, gamma = ensure_spd(S, return_gamma=True)
        assert gamma == 0.0
        np.testing.assert_array_equal(out, symmetrize(S))

    def test_rank_one(self):
        out, gamma = ensure_spd(np.ones((2, 2)), return_gamma=True)
        assert gamma > 0
        assert np.linalg.eigvalsh(out)[0] > 0

    def test_zero_matrix(self):
        with pytest.raises(NotRepairableError):
            ensure_spd(np.zeros((3, 3)))

    def test_negative_trace(self):
        with pytest.raises(NotRepairableError):
            ensure_spd(-np.eye(3))

    def test_as_spd(self):
        with pytest.raises(NotSPDError):
            as_spd(np.diag([1.0, -1e-3]))
        assert is_spd(as_spd(np.eye(2)))


def test_congruence_preserves_spd(rng):
    for _ in range(50):
        n = int(rng.integers(4, 20))
        p = int(rng.integers(1, n + 1))
        Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
        W = Q[:p]
        assert np.linalg.eigvalsh(W @ random_spd(rng, n) @ W.T)[0] > 0
