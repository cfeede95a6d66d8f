"""Deep-kernel Gaussian process regression with MLP and KAN feature maps.

Exact training by Cholesky, plus structured kernel interpolation (KISS-GP)
for low-dimensional latents and SKIP product kernels for raw high-dimensional
inputs. Gradients come from a small reverse-mode autodiff tape on numpy.
"""

from .data import Dataset, ecdf_fit, ecdf_transform, load_csv, partition, rmse
from .features import FeatureSpec, feature_param_count, init_feature, model_param_count
from .gp import gp_nll, gp_nll_grad, gp_predict
from .kernels import DeepKernelParams, KernelHyperparams
from .train import FitResult, TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "Dataset", "DeepKernelParams", "FeatureSpec", "FitResult", "KernelHyperparams",
    "TrainConfig", "ecdf_fit", "ecdf_transform", "feature_param_count", "fit", "gp_nll",
    "gp_nll_grad", "gp_predict", "init_feature", "load_csv", "model_param_count", "partition",
    "rmse",
]
