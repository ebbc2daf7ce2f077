import numpy as np
import pytest

from conftest import fd_gradient_errors, random_spd, spectrum_spd
from spdnet_psi.embedding import EmbeddingParams
from spdnet_psi.errors import CacheMismatchError, DimMismatchError
from spdnet_psi.features import FeatureSpec
from spdnet_psi.network import (
    Preprocess,
    SpdNet,
    bimap_forward,
    dense_forward,
    load_checkpoint,
    logeig_backward,
    logeig_forward,
    model_backward,
    model_forward,
    reeig_backward,
    reeig_forward,
    save_checkpoint,
    softmax_xent,
    stiefel_init,
)
from spdnet_psi.spd import logeuclid_dist, sym_vectorize

PSI_FEATURES = FeatureSpec("augmented_covariance", EmbeddingParams(24, 6))


def table_model(seed=0):
    return SpdNet.create(3, 2, PSI_FEATURES, seed=seed, preprocess=Preprocess(band=None))


class TestLayers:
    def test_bimap_identity(self, rng):
        Z = random_spd(rng, 5)
        np.testing.assert_allclose(bimap_forward(np.eye(5), Z), Z, atol=1e-15)

    def test_bimap_reduces(self, rng):
        W = stiefel_init(9, 18, rng)
        out = bimap_forward(W, random_spd(rng, 18))
        assert out.shape == (9, 9)
        assert np.linalg.eigvalsh(out)[0] > 0
        assert W.size == 162

    def test_bimap_dim_mismatch(self, rng):
        with pytest.raises(DimMismatchError):
            bimap_forward(np.eye(4), np.eye(5))

    def test_reeig_passthrough(self, rng):
        Z = random_spd(rng, 6)
        out, _ = reeig_forward(Z, 1e-4)
        np.testing.assert_allclose(out, Z, atol=1e-12)

    def test_reeig_clamps(self, rng):
        Z = spectrum_spd(rng, [1e-6, 2.0])
        out, _ = reeig_forward(Z, 1e-4)
        np.testing.assert_allclose(np.linalg.eigvalsh(out), [1e-4, 2.0], rtol=1e-9)

    def test_reeig_batch_floor(self, rng):
        Z = np.stack([spectrum_spd(rng, np.exp(rng.uniform(-15, 2, 8))) for _ in range(50)])
        out, _ = reeig_forward(Z, 1e-4)
        assert np.linalg.eigvalsh(out).min() >= 1e-4 - 1e-12

    def test_reeig_backward_identity(self, rng):
        Z = random_spd(rng, 5)
        _, eig = reeig_forward(Z, 1e-4)
        G = rng.standard_normal((5, 5))
        G = G + G.T
        np.testing.assert_allclose(reeig_backward(eig, G, 1e-4), G, atol=1e-12)

    def test_logeig(self, rng):
        assert logeig_forward(random_spd(rng, 9)).shape == (45,)
        np.testing.assert_array_equal(logeig_forward(np.eye(4)), np.zeros(10))
        for _ in range(20):
            Z = random_spd(rng, 7)
            assert abs(np.linalg.norm(logeig_forward(Z)) - logeuclid_dist(Z, np.eye(7))) < 1e-12

    def test_logeig_backward_fd(self, rng):
        Z = random_spd(rng, 4)
        g = rng.standard_normal(10)
        E = rng.standard_normal((4, 4))
        E = E + E.T
        h = 1e-6
        fd = (g @ logeig_forward(Z + h * E) - g @ logeig_forward(Z - h * E)) / (2 * h)
        an = np.sum(logeig_backward(np.linalg.eigh(Z), g) * E)
        assert abs(fd - an) < 1e-7 * (1 + abs(an))

    def test_softmax_xent(self):
        loss, _ = softmax_xent(np.array([[0.3, 0.3]]), [0])
        assert abs(loss - np.log(2)) < 1e-15
        loss, _ = softmax_xent(np.array([[20.0, 0.0]]), [0])
        assert loss < 1e-8
        # stable for huge logits
        loss, g = softmax_xent(np.array([[1000.0, -1000.0]]), [1])
        assert np.isfinite(loss) and np.all(np.isfinite(g))

    def test_softmax_xent_gradient(self, rng):
        z = rng.standard_normal((3, 4))
        y = np.array([0, 3, 1])
        _, g = softmax_xent(z, y)
        fd = np.zeros_like(z)
        for idx in np.ndindex(z.shape):
            e = np.zeros_like(z)
            e[idx] = 1e-6
            fd[idx] = (softmax_xent(z + e, y)[0] - softmax_xent(z - e, y)[0]) / 2e-6
        assert np.linalg.norm(fd - g) / np.linalg.norm(g) < 1e-8

    def test_dense(self, rng):
        W, b, v = rng.standard_normal((2, 5)), rng.standard_normal(2), rng.standard_normal(5)
        np.testing.assert_allclose(dense_forward(W, b, v), W @ v + b)


class TestModel:
    def test_table_shapes(self):
        m = table_model()
        X = np.random.default_rng(0).standard_normal((3, 1537))
        logits, cache = model_forward(m, X)
        assert cache["embedded"].shape == (1, 18, 1393)
        assert cache["S"].shape == (1, 18, 18)
        assert cache["bimap"].shape == (1, 9, 9)
        assert cache["reeig"].shape == (1, 9, 9)
        assert cache["logeig"].shape == (1, 45)
        assert logits.shape == (1, 2)

    def test_shape_report(self):
        rows = table_model().shape_report(1537)
        shapes = {layer: (shape, n) for _, layer, shape, n in rows}
        assert shapes["AugmentedDataset"] == ([1, 18, 1393], 0)
        assert shapes["Covariances"] == ([1, 18, 18], 0)
        assert shapes["BiMap"] == ([1, 9, 9], 162)
        assert shapes["ReEig"] == ([1, 9, 9], 0)
        assert shapes["LogEig"] == ([1, 45], 0)
        assert shapes["Linear"] == ([1, 2], 92)
        assert table_model().param_count() == 162 + 92

    def test_plain_shapes(self, rng):
        m = SpdNet.create(3, 2, FeatureSpec("covariance"), preprocess=Preprocess(band=None))
        logits, cache = model_forward(m, rng.standard_normal((3, 200)))
        assert cache["S"].shape[1:] == (3, 3)
        assert cache["bimap"].shape[1:] == (3, 3)
        assert cache["logeig"].shape[1:] == (6,)
        assert logits.shape == (1, 2)

    def test_deterministic(self, rng):
        m = table_model()
        X = rng.standard_normal((2, 3, 1537))
        a, _ = model_forward(m, X)
        b, _ = model_forward(m, X)
        assert a.tobytes() == b.tobytes()

    def test_scale_invariant_features(self, rng):
        m = table_model()
        X = rng.standard_normal((3, 1537))
        a = m.features_of(X)
        b = m.features_of(4.0 * X)
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)

    def test_stale_cache(self, rng):
        m = table_model()
        logits, cache = model_forward(m, rng.standard_normal((3, 1537)))
        m.set_params({"dense_b": m.dense_b + 1})
        with pytest.raises(CacheMismatchError):
            model_backward(m, cache, np.ones_like(logits))

    def test_checkpoint_round_trip(self, tmp_path, rng):
        m = table_model(seed=3)
        save_checkpoint(m, tmp_path)
        n = load_checkpoint(tmp_path)
        for k in m.PARAMS:
            assert getattr(m, k).tobytes() == getattr(n, k).tobytes()
        X = rng.standard_normal((3, 1537))
        assert model_forward(m, X)[0].tobytes() == model_forward(n, X)[0].tobytes()

    def test_spd_through_layers(self, rng):
        for _ in range(200):
            d_in = int(rng.integers(4, 33))
            d_out = int(rng.integers(2, d_in + 1))
            W = stiefel_init(d_out, d_in, rng)
            Z1 = bimap_forward(W, random_spd(rng, d_in))
            Z2, _ = reeig_forward(Z1)
            assert np.linalg.eigvalsh(Z1)[0] > 0
            assert np.linalg.eigvalsh(Z2)[0] >= 1e-4 - 1e-12


def random_model(rng, d_in, reduce, n_classes=2):
    n_ch = d_in
    m = SpdNet.create(n_ch, n_classes, FeatureSpec("covariance"), reduce=reduce, seed=int(rng.integers(1 << 30)))
    m.dense_b = rng.standard_normal(n_classes)
    return m


class TestGradients:
    @pytest.mark.parametrize("reduce", [True, False])
    def test_random_draws(self, rng, reduce):
        for _ in range(5):
            d = int(rng.integers(3, 9))
            m = random_model(rng, d, reduce, n_classes=int(rng.integers(2, 4)))
            S = np.stack([random_spd(rng, d) for _ in range(4)])
            y = rng.integers(0, m.n_classes, 4)
            errs = fd_gradient_errors(m, S, y)
            assert max(errs.values()) < 1e-5, errs

    def test_repeated_and_clamped(self, rng):
        for spectrum in ([2.0, 2.0, 1.0], [3.0, 1.0, 1.0, 1e-6, 1e-6], [1.5, 1.5, 1.5, 0.5]):
            d = len(spectrum)
            m = random_model(rng, d, reduce=False)
            S = np.stack([spectrum_spd(rng, spectrum) for _ in range(3)])
            errs = fd_gradient_errors(m, S, np.array([0, 1, 1]))
            assert max(errs.values()) < 1e-5, errs

    def test_input_gradient(self, rng):
        m = random_model(rng, 4, reduce=True)
        S = random_spd(rng, 4)[None]
        logits, cache = m.forward(S)
        g = np.array([[1.0, -0.5]])
        dS = m.backward(cache, g, wrt_input=True)["S"][0]
        E = rng.standard_normal((4, 4))
        E = E + E.T
        h = 1e-6
        fd = (np.sum(g * m.forward(S + h * E)[0]) - np.sum(g * m.forward(S - h * E)[0])) / (2 * h)
        assert abs(fd - np.sum(dS * E)) < 1e-7 * (1 + abs(fd))
