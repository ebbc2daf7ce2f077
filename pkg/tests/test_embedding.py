import numpy as np
import pytest

import spdnet_psi.embedding as emb
from spdnet_psi.embedding import (
    EmbeddingParams,
    MdopConfig,
    beta_statistic,
    delay_embed,
    fnn_fraction,
    mdop_epochs,
    mdop_lags,
    nearest_neighbors,
)
from spdnet_psi.errors import DegenerateGeometryError, EpochTooShortError, InvalidInputError
from spdnet_psi.signals import GeneratorSpec, gen_lorenz, standardize


def lorenz(seed, T=4000):
    return gen_lorenz(GeneratorSpec(kind="lorenz", n_times=T, seed=seed))


def candidates(x, lags, n):
    return np.stack([x[l : l + n] for l in lags])


class TestDelayEmbed:
    def test_table_shape(self, rng):
        assert delay_embed(rng.standard_normal((3, 1537)), 24, 6).shape == (18, 1393)

    def test_rows(self):
        x = np.arange(10.0)[None]
        Y = delay_embed(x, 3, 2)
        np.testing.assert_array_equal(Y, [[0, 1, 2, 3], [3, 4, 5, 6]])

    def test_psi1(self, rng):
        X = rng.standard_normal((2, 20))
        np.testing.assert_array_equal(delay_embed(X, 1, 1), X[:, :19])

    def test_channel_major(self, rng):
        X = rng.standard_normal((3, 100))
        tau, psi = 4, 5
        Y = delay_embed(X, tau, psi)
        n = 100 - psi * tau
        for c in range(3):
            for p in range(psi):
                np.testing.assert_array_equal(Y[c * psi + p], X[c, p * tau : p * tau + n])

    def test_batched(self, rng):
        X = rng.standard_normal((4, 2, 50))
        Y = delay_embed(X, 3, 4)
        assert Y.shape == (4, 8, 38)
        np.testing.assert_array_equal(Y[2], delay_embed(X[2], 3, 4))

    def test_composition(self, rng):
        X = rng.standard_normal((2, 60))
        twice = delay_embed(delay_embed(X, 3, 1), 5, 1)
        once = delay_embed(X, 8, 1)
        np.testing.assert_array_equal(twice, once[:, : twice.shape[1]])

    def test_too_short(self):
        with pytest.raises(EpochTooShortError):
            delay_embed(np.zeros((1, 10)), 3, 3)

    def test_params(self):
        with pytest.raises(InvalidInputError):
            EmbeddingParams(0, 2)
        with pytest.raises(EpochTooShortError):
            EmbeddingParams(10, 6).check_estimable(3, 70)
        EmbeddingParams(24, 6).check_estimable(3, 1537)


class TestNeighbours:
    def test_matches_brute_force(self, rng):
        P = rng.standard_normal((300, 3))
        idx, dist = nearest_neighbors(P, theiler=2, chunk=64)
        D = np.linalg.norm(P[:, None] - P[None], axis=-1)
        i = np.arange(300)
        D[np.abs(i[:, None] - i[None]) <= 2] = np.inf
        np.testing.assert_array_equal(idx, D.argmin(1))
        np.testing.assert_allclose(dist, D.min(1), rtol=1e-12)


class TestBeta:
    def test_noise_flat(self, rng):
        x = rng.standard_normal(2000)
        n = 1980
        b = beta_statistic(x[:n, None], candidates(x, range(1, 21), n), theiler=20)
        assert (b.max() - b.min()) / abs(b.mean()) < 0.1

    def test_lorenz_argmax_stable(self):
        # first beta maximum of the x-trace over lags 1..30
        best = []
        for seed in range(4):
            x = standardize(lorenz(seed)[0])
            n = len(x) - 30
            b = beta_statistic(x[:n, None], candidates(x, range(1, 31), n), theiler=30)
            best.append(int(np.argmax(b)) + 1)
        assert max(best) - min(best) <= 2
        assert all(abs(b - np.median(best)) <= 1 for b in best)

    def test_duplicated_points(self):
        P = np.zeros((100, 2))
        with pytest.raises(DegenerateGeometryError):
            beta_statistic(P, np.arange(100.0))

    def test_scalar_candidate(self, rng):
        P = rng.standard_normal((100, 2))
        c = rng.standard_normal(100)
        assert isinstance(beta_statistic(P, c), float)


class TestFnn:
    def test_full_state(self):
        S = standardize(lorenz(1)).T
        x = S[:, 0]
        n = len(x) - 10
        assert fnn_fraction(S[:n], x[10 : 10 + n], theiler=30) < 0.05

    def test_projection(self):
        x = standardize(lorenz(1)[0])
        n = len(x) - 10
        assert fnn_fraction(x[:n, None], x[10 : 10 + n], theiler=30) > 0.2

    def test_constant(self):
        with pytest.raises(DegenerateGeometryError):
            fnn_fraction(np.ones((100, 1)), np.ones(100))


class TestMdop:
    def test_deterministic(self):
        x = standardize(lorenz(2)[0])
        assert mdop_lags(x) == mdop_lags(x)

    def test_lorenz_lag_count(self):
        for seed in range(3):
            lags = mdop_lags(standardize(lorenz(seed)[0]))
            assert 2 <= len(lags) <= 6

    def test_lags_increasing_bounded(self, rng):
        cfg = MdopConfig(tau_max=40)
        for x in (standardize(lorenz(0, 1500)[0]), rng.standard_normal(800)):
            lags = mdop_lags(x, cfg)
            assert all(a < b for a, b in zip(lags, lags[1:]))
            assert 1 <= lags[0] and lags[-1] <= 40

    def test_noise_hits_psi_max(self, rng):
        lags = mdop_lags(rng.standard_normal(1000), MdopConfig(psi_max=5))
        assert len(lags) == 5

    def test_multichannel(self, rng):
        X = np.stack([rng.standard_normal(600), standardize(lorenz(0, 600)[0])])
        assert len(mdop_lags(X)) >= 1


def fake_lags(table):
    it = iter(table)
    return lambda X, cfg=None: next(it)


class TestMdopEpochs:
    def test_single_epoch(self, monkeypatch):
        monkeypatch.setattr(emb, "mdop_lags", fake_lags([(3, 5)]))
        assert mdop_epochs(np.zeros((1, 1, 100))) == EmbeddingParams(4, 2)

    def test_two_epochs(self, monkeypatch):
        monkeypatch.setattr(emb, "mdop_lags", fake_lags([(3, 5), (2, 4, 6)]))
        assert mdop_epochs(np.zeros((2, 1, 100))) == EmbeddingParams(4, 2)

    def test_floor(self, monkeypatch):
        monkeypatch.setattr(emb, "mdop_lags", fake_lags([(1,), (2, 5)]))
        # tau = (1 + 3) / 2 = 2, psi = 3 / 2 -> 1
        assert mdop_epochs(np.zeros((2, 1, 100))) == EmbeddingParams(2, 1)

    def test_identical_epochs(self):
        x = standardize(lorenz(0, 1200)[:1])
        one = mdop_epochs(x[None])
        assert mdop_epochs(np.stack([x, x, x])) == one

    def test_permutation_invariant(self, rng):
        X = rng.standard_normal((5, 2, 400))
        cfg = MdopConfig(channel_mode="average", psi_max=4)
        a = mdop_epochs(X, cfg)
        assert mdop_epochs(X[rng.permutation(5)], cfg) == a
        assert mdop_epochs(X[::-1], MdopConfig(psi_max=4)) == mdop_epochs(X, MdopConfig(psi_max=4))

    def test_empty(self):
        with pytest.raises(InvalidInputError):
            mdop_epochs(np.zeros((0, 2, 100)))

    def test_config_validation(self):
        with pytest.raises(InvalidInputError):
            MdopConfig(channel_mode="mean").resolve(100)
        assert MdopConfig().resolve(4000) == (100, 100)
        assert MdopConfig().resolve(512) == (51, 51)
