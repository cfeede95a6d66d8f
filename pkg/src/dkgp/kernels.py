"""ARD-RBF base kernel and its deep-kernel composition."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .errors import DimensionMismatch
from .features import FeatureMapParams, FeatureSpec, feature_forward

NOISE_FLOOR = 1e-6
SIGNAL_FLOOR = 1e-10


@dataclass
class KernelHyperparams:
    """Log-parameterized RBF hyperparameters plus the constant mean."""

    log_lengthscales: np.ndarray
    log_signal_variance: float = 0.0
    log_noise_variance: float = float(np.log(0.01))
    mean_constant: float = 0.0

    def __post_init__(self):
        self.log_lengthscales = np.atleast_1d(np.asarray(self.log_lengthscales, dtype=float))

    @classmethod
    def default(cls, q, y=None):
        return cls(np.zeros(q), 0.0, float(np.log(0.01)),
                   0.0 if y is None else float(np.mean(y)))

    @property
    def lengthscales(self):
        return np.exp(self.log_lengthscales)

    @property
    def signal_variance(self):
        return max(float(np.exp(self.log_signal_variance)), SIGNAL_FLOOR)

    @property
    def noise_variance(self):
        return max(float(np.exp(self.log_noise_variance)), NOISE_FLOOR)

    def flat(self, prefix="kernel"):
        return {
            f"{prefix}.log_lengthscales": self.log_lengthscales,
            f"{prefix}.log_signal_variance": np.asarray(self.log_signal_variance, float),
            f"{prefix}.log_noise_variance": np.asarray(self.log_noise_variance, float),
            f"{prefix}.mean_constant": np.asarray(self.mean_constant, float),
        }

    @classmethod
    def from_flat(cls, flat, prefix="kernel"):
        return cls(
            np.array(flat[f"{prefix}.log_lengthscales"], dtype=float),
            float(flat[f"{prefix}.log_signal_variance"]),
            float(flat[f"{prefix}.log_noise_variance"]),
            float(flat[f"{prefix}.mean_constant"]),
        )


@dataclass
class DeepKernelParams:
    """Feature map (``None`` means identity) composed with an RBF base kernel."""

    feature: FeatureMapParams | None
    base: KernelHyperparams

    def __post_init__(self):
        q = len(self.base.log_lengthscales)
        if self.feature is not None and self.feature.spec.out_dim != q:
            raise DimensionMismatch(
                f"feature output width {self.feature.spec.out_dim} != {q} lengthscales")

    @property
    def spec(self) -> FeatureSpec | None:
        return None if self.feature is None else self.feature.spec

    def flat(self):
        out = {} if self.feature is None else dict(self.feature.flat())
        out.update(self.base.flat())
        return out

    def with_flat(self, flat):
        feature = None
        if self.feature is not None:
            feature = FeatureMapParams.from_flat(self.feature.spec, flat, self.feature.seed)
        return DeepKernelParams(feature, KernelHyperparams.from_flat(flat))

    def copy(self):
        return self.with_flat({k: np.array(v, copy=True) for k, v in self.flat().items()})

    def latent(self, X):
        X = np.asarray(X, dtype=float)
        return X if self.feature is None else feature_forward(self.spec, self.feature.layers, X)

    def with_base(self, **changes):
        return DeepKernelParams(self.feature, replace(self.base, **changes))

    def to_json_dict(self):
        return {
            "feature": None if self.feature is None else self.feature.to_json_dict(),
            "kernel": {
                "log_lengthscales": self.base.log_lengthscales.tolist(),
                "log_signal_variance": float(self.base.log_signal_variance),
                "log_noise_variance": float(self.base.log_noise_variance),
                "mean_constant": float(self.base.mean_constant),
            },
        }

    @classmethod
    def from_json_dict(cls, d):
        feature = None if d["feature"] is None else FeatureMapParams.from_json_dict(d["feature"])
        return cls(feature, KernelHyperparams(**d["kernel"]))


def floored_exp(x, floor):
    """``exp(x)``, replaced by the constant ``floor`` (no gradient) below it."""
    val = np.exp(ad.value_of(x))
    if val < floor:
        return np.asarray(floor)
    return ad.exp(x)


def rbf_graph(log_lengthscales, log_signal_variance, X1, X2, symmetric=False):
    """Traceable ARD-RBF covariance ``sf2 * exp(-0.5 * sum_d (x_d - x'_d)^2 / l_d^2)``."""
    q = ad.value_of(log_lengthscales).shape[0]
    for X in (X1, X2):
        if ad.value_of(X).ndim != 2 or ad.value_of(X).shape[1] != q:
            raise DimensionMismatch(
                f"inputs need {q} columns (one per lengthscale), got {ad.value_of(X).shape}")
    inv_l = ad.exp(ad.multiply(-1.0, log_lengthscales))
    A = ad.multiply(X1, inv_l)
    B = A if symmetric else ad.multiply(X2, inv_l)
    D2 = ad.pairwise_sqdist(A, B, symmetric=symmetric)
    sf2 = floored_exp(log_signal_variance, SIGNAL_FLOOR)
    return ad.multiply(sf2, ad.exp(ad.multiply(-0.5, D2)))


def rbf_matrix(hp: KernelHyperparams, X1, X2):
    X1 = np.asarray(X1, dtype=float)
    X2 = np.asarray(X2, dtype=float)
    return rbf_graph(hp.log_lengthscales, hp.log_signal_variance, X1, X2,
                     symmetric=X1 is X2)


def deep_kernel_matrix(dk: DeepKernelParams, X1, X2):
    """Base kernel evaluated on the feature-mapped inputs (noise not included)."""
    same = X1 is X2
    Z1 = dk.latent(X1)
    Z2 = Z1 if same else dk.latent(X2)
    return rbf_graph(dk.base.log_lengthscales, dk.base.log_signal_variance, Z1, Z2,
                     symmetric=same)


def kernel_diag(dk: DeepKernelParams, X):
    return np.full(np.shape(X)[0], dk.base.signal_variance)


def latent_graph(p, spec, X):
    """Feature-map the inputs using parameters from a flat (possibly traced) dict."""
    if spec is None:
        return X
    layers = [{k.rsplit(".", 1)[1]: v for k, v in p.items() if k.startswith(f"feature.{i}.")}
              for i in range(len(spec.layer_shapes()))]
    return feature_forward(spec, layers, X)
