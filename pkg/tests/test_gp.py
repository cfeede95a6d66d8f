import math

import numpy as np
import pytest

from dkgp import autodiff as ad
from dkgp.features import FeatureSpec, init_feature
from dkgp.gp import dnll_dK, gp_nll, gp_nll_grad, gp_predict, nll_graph
from dkgp.kernels import DeepKernelParams, KernelHyperparams, rbf_matrix

from oracles import dense_gp_nll, dense_gp_predict, kan_dkl_nll_ld, rbf_loop
from problems import kan_toy


def identity_dk(ell, sf2=1.0, noise=0.01, c=0.0):
    return DeepKernelParams(None, KernelHyperparams(np.log(ell), math.log(sf2), math.log(noise), c))


class TestNll:
    def test_single_point(self):
        # sf2 + noise = 1
        dk = identity_dk([1.0], sf2=0.75, noise=0.25)
        assert gp_nll(dk, np.zeros((1, 1)), np.zeros(1)) == pytest.approx(0.918939, abs=1e-6)

    def test_identity_covariance(self):
        # far-apart points and sf2 + noise = 1 make K + s2 I the identity
        dk = identity_dk([1e-3], sf2=0.5, noise=0.5)
        nll = gp_nll(dk, np.array([[0.0], [100.0]]), np.ones(2))
        assert nll == pytest.approx(0.5 * (2 + 2 * math.log(2 * math.pi)), rel=1e-12)
        assert nll == pytest.approx(2.837877, abs=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    def test_lu_oracle(self, seed):
        rng = np.random.default_rng(seed)
        X, y = rng.standard_normal((8, 2)), rng.standard_normal(8)
        ell, sf2, noise, c = rng.uniform(0.3, 2, 2), 1.4, 0.05, 0.2
        K = rbf_loop(X, X, ell, sf2) + noise * np.eye(8)
        assert gp_nll(identity_dk(ell, sf2, noise, c), X, y) == pytest.approx(
            dense_gp_nll(K, y - c), rel=1e-12)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        X, y = rng.standard_normal((15, 3)), rng.standard_normal(15)
        dk = identity_dk([0.7, 1.1, 1.9], 1.3, 0.1, 0.4)
        perm = rng.permutation(15)
        assert abs(gp_nll(dk, X, y) - gp_nll(dk, X[perm], y[perm])) <= 1e-12


class TestDnllDK:
    def test_zero_targets(self):
        np.testing.assert_allclose(dnll_dK(np.eye(2), np.zeros(2)), 0.5 * np.eye(2))

    def test_matched_scale(self):
        np.testing.assert_allclose(dnll_dK(np.eye(1), np.ones(1)), [[0.0]])

    def test_finite_differences(self):
        rng = np.random.default_rng(1)
        M = rng.standard_normal((5, 5))
        K = M @ M.T + 5 * np.eye(5)
        r = rng.standard_normal(5)
        G = dnll_dK(K, r)
        assert np.abs(G - G.T).max() <= 1e-12
        h = 1e-6
        fd = np.zeros((5, 5))
        for i in range(5):
            for j in range(5):
                E = np.zeros((5, 5))
                E[i, j] = h
                fd[i, j] = (dense_gp_nll(K + E, r) - dense_gp_nll(K - E, r)) / (2 * h)
        np.testing.assert_allclose(G, fd, atol=1e-5)


class TestGradient:
    def test_mean_gradient_zero_at_constant_targets(self):
        feature = init_feature(FeatureSpec("mlp", (2, 3, 2)), seed=0)
        for layer in feature.layers:
            layer["weight"][:] = 0
        dk = DeepKernelParams(feature, KernelHyperparams(np.zeros(2), 0.0, math.log(0.1), 1.5))
        X = np.random.default_rng(0).standard_normal((6, 2))
        g = gp_nll_grad(dk, X, np.full(6, 1.5))
        assert g["kernel.mean_constant"] == 0.0

    def test_single_point_lengthscale_gradient_zero(self):
        g = gp_nll_grad(identity_dk([0.4, 2.0]), np.array([[0.3, 0.1]]), np.array([0.7]))
        np.testing.assert_array_equal(g["kernel.log_lengthscales"], 0.0)

    def test_kan_toy_grad_check(self):
        dk, X, y = kan_toy(0)
        spec = dk.spec
        err = ad.grad_check(lambda p: nll_graph(p, spec, X, y), dk.flat(),
                            fd_fn=lambda p: kan_dkl_nll_ld(p, spec, X, y))
        assert err < 1e-4

    @pytest.mark.parametrize("seed", range(20))
    @pytest.mark.parametrize("kind", ["mlp", "kan"])
    def test_matches_finite_differences_per_class(self, kind, seed):
        rng = np.random.default_rng(seed)
        spec = FeatureSpec(kind, (2, 3, 2))
        feature = init_feature(spec, seed=seed)
        if kind == "kan":
            for layer in feature.layers:
                layer["spline_weight"] = rng.normal(0, 0.5, layer["spline_weight"].shape)
        base = KernelHyperparams(rng.normal(-0.5, 0.3, 2), rng.normal(0, 0.3),
                                 math.log(0.05), rng.normal())
        dk = DeepKernelParams(feature, base)
        X, y = rng.uniform(0, 1, (8, 2)), rng.standard_normal(8)
        grads = gp_nll_grad(dk, X, y)
        flat = dk.flat()
        h = 1e-5
        for name, value in flat.items():
            value = np.asarray(value, float)
            fd = np.zeros_like(value)
            for i in np.ndindex(value.shape):
                up, down = value.copy(), value.copy()
                up[i] += h
                down[i] -= h
                fd[i] = (gp_nll(dk.with_flat({**flat, name: up}), X, y)
                         - gp_nll(dk.with_flat({**flat, name: down}), X, y)) / (2 * h)
            # the last bias only shifts the latent, which a stationary kernel
            # ignores; its gradient is 0 and FD returns round-off near 1e-8
            scale = max(np.linalg.norm(fd), 1e-3)
            assert np.linalg.norm(grads[name] - fd) / scale < 1e-4, name


class TestPredict:
    def test_interpolates_training_data(self):
        rng = np.random.default_rng(0)
        X, y = rng.uniform(-2, 2, (6, 1)), rng.standard_normal(6)
        pred = gp_predict(identity_dk([0.5], noise=1e-12), X, y, X)
        np.testing.assert_allclose(pred.mean, y, atol=1e-4)
        assert pred.variance.max() <= 1e-4

    def test_reverts_to_prior(self):
        rng = np.random.default_rng(1)
        X, y = rng.uniform(-1, 1, (5, 1)), rng.standard_normal(5)
        pred = gp_predict(identity_dk([0.3], sf2=1.7, c=0.25), X, y, np.array([[50.0], [-80.0]]))
        np.testing.assert_allclose(pred.mean, 0.25, atol=1e-6)
        np.testing.assert_allclose(pred.variance, 1.7, atol=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    def test_dense_oracle(self, seed):
        rng = np.random.default_rng(seed)
        X, y, Xs = rng.standard_normal((6, 2)), rng.standard_normal(6), rng.standard_normal((3, 2))
        ell = rng.uniform(0.5, 2, 2)
        pred = gp_predict(identity_dk(ell, 1.2, 0.1, -0.3), X, y, Xs)
        mean, cov = dense_gp_predict(X, y, Xs, ell, 1.2, 0.1, -0.3)
        np.testing.assert_allclose(pred.mean, mean, atol=1e-10)
        np.testing.assert_allclose(pred.covariance, cov, atol=1e-10)
        assert np.abs(pred.covariance - pred.covariance.T).max() <= 1e-10

    def test_include_noise(self):
        rng = np.random.default_rng(2)
        X, y = rng.standard_normal((4, 1)), rng.standard_normal(4)
        dk = identity_dk([1.0], noise=0.2)
        latent = gp_predict(dk, X, y, X[:2])
        noisy = gp_predict(dk, X, y, X[:2], include_noise=True)
        assert noisy.includes_noise and not latent.includes_noise
        np.testing.assert_allclose(noisy.variance, latent.variance + 0.2)
        diag_only = gp_predict(dk, X, y, X[:2], full_cov=False)
        assert diag_only.covariance is None
        np.testing.assert_allclose(diag_only.variance, latent.variance, atol=1e-14)

    @pytest.mark.parametrize("seed", range(10))
    def test_variance_shrinks_with_more_data(self, seed):
        rng = np.random.default_rng(seed)
        X, y = rng.uniform(-3, 3, (8, 1)), rng.standard_normal(8)
        Xs = np.linspace(-4, 4, 30)[:, None]
        dk = identity_dk([0.8], 1.0, 0.05)
        fewer = gp_predict(dk, X[:-1], y[:-1], Xs, full_cov=False).variance
        more = gp_predict(dk, X, y, Xs, full_cov=False).variance
        assert np.all(more <= fewer + 1e-8)


def test_predict_uses_deep_features():
    spec = FeatureSpec("kan", (2, 3, 2))
    feature = init_feature(spec, seed=0)
    dk = DeepKernelParams(feature, KernelHyperparams(np.zeros(2), 0.0, math.log(0.1), 0.0))
    rng = np.random.default_rng(0)
    X, y, Xs = rng.uniform(0, 1, (5, 2)), rng.standard_normal(5), rng.uniform(0, 1, (2, 2))
    Z, Zs = dk.latent(X), dk.latent(Xs)
    K = rbf_matrix(dk.base, Z, Z) + 0.1 * np.eye(5)
    expected = rbf_matrix(dk.base, Zs, Z) @ np.linalg.solve(K, y)
    np.testing.assert_allclose(gp_predict(dk, X, y, Xs).mean, expected, rtol=1e-10)
