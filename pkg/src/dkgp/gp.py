"""Exact Gaussian-process regression with a deep kernel."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import autodiff as ad
from . import linalg
from .errors import NotPositiveDefinite
from .features import l1_penalty
from .kernels import (
    NOISE_FLOOR,
    DeepKernelParams,
    floored_exp,
    latent_graph,
    rbf_graph,
    rbf_matrix,
)

LOG_2PI = math.log(2.0 * math.pi)
# predictive variances in (-VARIANCE_SLACK * scale, 0) are treated as round-off
VARIANCE_SLACK = 1e-8


@dataclass
class PosteriorPrediction:
    mean: np.ndarray
    variance: np.ndarray
    covariance: np.ndarray | None = None
    includes_noise: bool = False

    @property
    def std(self):
        return np.sqrt(self.variance)


def nll_graph(p, spec, X, y, l1=0.0):
    """Negative log marginal likelihood built from a flat parameter dict.

    ``p`` maps parameter names to arrays or traced values, see
    :meth:`DeepKernelParams.flat`.
    """
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    Z = latent_graph(p, spec, X)
    K = rbf_graph(p["kernel.log_lengthscales"], p["kernel.log_signal_variance"], Z, Z,
                  symmetric=True)
    noise = floored_exp(p["kernel.log_noise_variance"], NOISE_FLOOR)
    K_noisy = ad.add(K, ad.multiply(noise, np.eye(n)))
    r = ad.subtract(y, p["kernel.mean_constant"])
    fit_and_complexity = ad.cholesky_logdet_quadform(K_noisy, r)
    nll = ad.add(ad.multiply(0.5, fit_and_complexity), 0.5 * n * LOG_2PI)
    if l1 and spec is not None:
        layers = [{k.rsplit(".", 1)[1]: v for k, v in p.items() if k.startswith(f"feature.{i}.")}
                  for i in range(len(spec.layer_shapes()))]
        nll = ad.add(nll, ad.multiply(l1, l1_penalty(spec, layers)))
    return nll


def gp_nll(dk: DeepKernelParams, X, y, l1=0.0) -> float:
    """``0.5 * [r^T (K + s2 I)^-1 r + log|K + s2 I| + n log 2 pi]`` with ``r = y - c``."""
    return float(nll_graph(dk.flat(), dk.spec, np.asarray(X, float), y, l1))


def gp_nll_and_grad(dk: DeepKernelParams, X, y, l1=0.0):
    X = np.asarray(X, float)
    return ad.value_and_grad(lambda p: nll_graph(p, dk.spec, X, y, l1), dk.flat())


def gp_nll_grad(dk: DeepKernelParams, X, y, l1=0.0) -> dict:
    """Gradient of :func:`gp_nll` with respect to every trainable parameter."""
    return gp_nll_and_grad(dk, X, y, l1)[1]


def dnll_dK(K_noisy, y_centered, chol=None):
    """Derivative of the NLL with respect to the noisy covariance matrix.

    ``0.5 * (K^-1 - K^-1 y y^T K^-1)``, symmetrized.
    """
    L = linalg.cholesky(K_noisy) if chol is None else chol
    n = L.shape[0]
    K_inv = linalg.cho_solve(L, np.eye(n))
    alpha = linalg.cho_solve(L, np.asarray(y_centered, float))
    G = 0.5 * (K_inv - np.outer(alpha, alpha))
    return 0.5 * (G + G.T)


def _clamp_variance(var, scale):
    tol = VARIANCE_SLACK * max(1.0, scale)
    if np.any(var < -tol):
        raise NotPositiveDefinite(f"negative predictive variance {var.min():.3e}")
    return np.maximum(var, 0.0)


def gp_predict(dk: DeepKernelParams, X, y, Xstar, include_noise=False, full_cov=True):
    """Posterior mean and covariance of the latent function at ``Xstar``."""
    X = np.asarray(X, float)
    Xstar = np.asarray(Xstar, float)
    y = np.asarray(y, float)
    hp = dk.base
    Z = dk.latent(X)
    Zs = dk.latent(Xstar)
    K = rbf_matrix(hp, Z, Z) + hp.noise_variance * np.eye(len(y))
    L = linalg.cholesky(K)
    Ks = rbf_matrix(hp, Zs, Z)
    alpha = linalg.cho_solve(L, y - hp.mean_constant)
    mean = hp.mean_constant + Ks @ alpha
    V = scipy.linalg.solve_triangular(L, Ks.T, lower=True)
    sf2 = hp.signal_variance
    noise = hp.noise_variance if include_noise else 0.0
    if full_cov:
        cov = rbf_matrix(hp, Zs, Zs) - V.T @ V
        cov = 0.5 * (cov + cov.T)
        var = _clamp_variance(np.diag(cov).copy(), sf2)
        np.fill_diagonal(cov, var)
        if include_noise:
            cov[np.diag_indices_from(cov)] += noise
        return PosteriorPrediction(mean, var + noise, cov, include_noise)
    var = _clamp_variance(sf2 - np.sum(V * V, axis=0), sf2)
    return PosteriorPrediction(mean, var + noise, None, include_noise)
