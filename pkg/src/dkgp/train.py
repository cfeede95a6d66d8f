"""Full-batch Adam training of deep-kernel GPs on the negative log marginal likelihood."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import linalg, scalable
from ._io import atomic_write_text
from .data import Dataset
from .errors import ConfigError, DkgpError, NonFiniteLoss, ShapeMismatch
from .gp import PosteriorPrediction, gp_predict, nll_graph
from .kernels import DeepKernelParams, rbf_matrix

log = logging.getLogger(__name__)

SCALABLE_MODES = ("exact", "kiss", "skip", "auto")
#: Training sets larger than this switch ``auto`` mode to grid interpolation.
AUTO_SCALABLE_THRESHOLD = 20000


@dataclass
class TrainConfig:
    lr0: float = 0.075
    decay: float = 0.997
    epochs: int = 2500
    patience: int = 1000
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    scalable_mode: str = "auto"
    grid_m_per_dim: int = 100
    grid_rebuild_every: int = 50
    lanczos_rank: int = 100
    clip_norm: float = 10.0
    l1: float = 0.0

    def __post_init__(self):
        if not 0 < self.decay <= 1:
            raise ConfigError("decay must lie in (0, 1]")
        if self.epochs < 0 or self.patience < 0:
            raise ConfigError("epochs and patience must be >= 0")
        if self.patience > self.epochs:
            raise ConfigError(f"patience ({self.patience}) exceeds epochs ({self.epochs})")
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")
        if self.scalable_mode not in SCALABLE_MODES:
            raise ConfigError(f"scalable_mode must be one of {SCALABLE_MODES}")
        if self.grid_m_per_dim < 4:
            raise ConfigError("grid_m_per_dim must be >= 4")
        if self.grid_rebuild_every < 1 or self.lanczos_rank < 1:
            raise ConfigError("grid_rebuild_every and lanczos_rank must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training option(s): {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(np.asarray(p, float)) for k, p in params.items()},
                   {k: np.zeros_like(np.asarray(p, float)) for k, p in params.items()})


@dataclass
class FitResult:
    best_params: DeepKernelParams
    loss_history: list
    best_epoch: int  # -1 when no epoch ran
    stopped_early: bool
    mode: str = "exact"
    extra: dict = field(default_factory=dict)

    @property
    def best_loss(self):
        return self.loss_history[self.best_epoch] if self.loss_history else math.nan

    @property
    def epochs_run(self):
        return len(self.loss_history)


def lr_at_epoch(cfg: TrainConfig, t: int) -> float:
    if t < 0:
        raise ValueError("epoch index must be >= 0")
    return cfg.lr0 * cfg.decay**t


def adam_step(state: AdamState, params, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    t = state.t + 1
    new_params, m_new, v_new = {}, {}, {}
    for k, p in params.items():
        p = np.asarray(p, float)
        g = np.asarray(grads[k], float)
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ShapeMismatch(f"{k}: parameter {p.shape}, gradient {g.shape}")
        m = beta1 * state.m[k] + (1 - beta1) * g
        v = beta2 * state.v[k] + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        new_params[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        m_new[k], v_new[k] = m, v
    return new_params, AdamState(m_new, v_new, t)


def clip_global_norm(grads, max_norm):
    norm = math.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values()))
    if norm > max_norm:
        return {k: g * (max_norm / norm) for k, g in grads.items()}
    return grads


def optimize(loss_and_grad, params, cfg: TrainConfig):
    """Adam with exponential learning-rate decay and early stopping on the loss.

    ``loss_and_grad(params, epoch)`` returns ``(loss, grads)``. Training stops
    before epoch ``t`` once ``t - best_epoch > patience``. Returns
    ``(best_params, history, best_epoch, stopped_early)``.
    """
    state = AdamState.zeros_like(params)
    best, best_epoch, best_params = math.inf, -1, dict(params)
    history = []
    stopped_early = False
    for t in range(cfg.epochs):
        if best_epoch >= 0 and t - best_epoch > cfg.patience:
            stopped_early = True
            break
        loss, grads = loss_and_grad(params, t)
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise NonFiniteLoss(f"non-finite loss or gradient at epoch {t}", epoch=t)
        history.append(float(loss))
        if loss < best:
            best, best_epoch = loss, t
            best_params = {k: np.array(v, copy=True) for k, v in params.items()}
        grads = clip_global_norm(grads, cfg.clip_norm)
        params, state = adam_step(state, params, grads, lr_at_epoch(cfg, t),
                                  cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    return best_params, history, best_epoch, stopped_early


def resolve_mode(cfg: TrainConfig, dk: DeepKernelParams, n: int) -> str:
    if cfg.scalable_mode != "auto":
        return cfg.scalable_mode
    if n <= AUTO_SCALABLE_THRESHOLD:
        return "exact"
    return "skip" if dk.feature is None else "kiss"


def _exact_objective(dk, data, cfg):
    X, y, spec = data.X, data.y, dk.spec

    def loss_and_grad(p, t):
        return ad.value_and_grad(lambda q: nll_graph(q, spec, X, y, cfg.l1), p)

    return loss_and_grad


def _kiss_objective(dk, data, cfg):
    X, y, spec = data.X, data.y, dk.spec
    cache = {}

    def loss_and_grad(p, t):
        if "grid" not in cache or t % cfg.grid_rebuild_every == 0:
            Z = dk.with_flat(p).latent(X)
            cache["grid"] = scalable.build_grid(Z, cfg.grid_m_per_dim)
        grid = cache["grid"]
        return ad.value_and_grad(lambda q: scalable.kiss_nll_graph(q, spec, X, y, grid), p)

    return loss_and_grad


def _skip_objective(dk, data, cfg, step=1e-4):
    """Central differences over the d + 3 kernel hyperparameters."""
    if dk.feature is not None:
        raise ConfigError("skip mode applies to the plain GP only")
    X, y = data.X, data.y
    grids = [scalable.build_grid(X[:, [j]], cfg.grid_m_per_dim) for j in range(X.shape[1])]
    rank = min(cfg.lanczos_rank, len(y))

    def nll(p):
        return scalable.skip_nll(X, y, p["kernel.log_lengthscales"],
                                 float(p["kernel.log_signal_variance"]),
                                 float(p["kernel.log_noise_variance"]),
                                 float(p["kernel.mean_constant"]), grids, rank)

    def loss_and_grad(p, t):
        value = nll(p)
        grads = {}
        for k, v in p.items():
            base = np.asarray(v, float)
            g = np.zeros_like(base)
            for i in np.ndindex(base.shape):
                up, down = base.copy(), base.copy()
                up[i] += step
                down[i] -= step
                g[i] = (nll({**p, k: up}) - nll({**p, k: down})) / (2 * step)
            grads[k] = g
        return value, grads

    return loss_and_grad


_OBJECTIVES = {"exact": _exact_objective, "kiss": _kiss_objective, "skip": _skip_objective}


def fit(dk_init: DeepKernelParams, cfg: TrainConfig, data: Dataset) -> FitResult:
    """Train every parameter of ``dk_init`` jointly; returns the best snapshot seen."""
    mode = resolve_mode(cfg, dk_init, data.n)
    loss_and_grad = _OBJECTIVES[mode](dk_init, data, cfg)

    def guarded(p, t):
        try:
            return loss_and_grad(p, t)
        except NonFiniteLoss:
            raise
        except (DkgpError, ArithmeticError, np.linalg.LinAlgError) as exc:
            exc.epoch = t
            exc.args = (f"epoch {t}: {exc}",) + exc.args[1:]
            raise

    best, history, best_epoch, stopped = optimize(guarded, dk_init.flat(), cfg)
    log.info("fit[%s]: %d epochs, best NLL %.6g at epoch %d", mode, len(history),
             history[best_epoch] if history else math.nan, best_epoch)
    return FitResult(dk_init.with_flat(best), history, best_epoch, stopped, mode)


def predict(dk: DeepKernelParams, mode, train: Dataset, Xstar, cfg: TrainConfig | None = None,
            variance=True) -> PosteriorPrediction:
    """Noise-free predictive mean (and variance) in the given scalable mode.

    ``skip`` mode returns the mean only; its variance is reported as NaN.
    """
    cfg = cfg or TrainConfig()
    Xstar = np.asarray(Xstar, float)
    if mode == "exact":
        return gp_predict(dk, train.X, train.y, Xstar, full_cov=False)
    if mode == "kiss":
        model = scalable.KissGpModel.build(dk, train.X, cfg.grid_m_per_dim)
        return scalable.kiss_predict(model, train.y, dk.latent(Xstar), variance=variance)
    if mode == "skip":
        hp = dk.base
        grids = [scalable.build_grid(train.X[:, [j]], cfg.grid_m_per_dim)
                 for j in range(train.d)]
        op = scalable.SkipOperator(
            scalable.ski_factors(train.X, hp.lengthscales, grids=grids),
            min(cfg.lanczos_rank, train.n))
        sf2, noise = hp.signal_variance, hp.noise_variance
        alpha = linalg.conjugate_gradient(lambda v: sf2 * op.mvm(v) + noise * v,
                                          train.y - hp.mean_constant, 1e-8, 10 * train.n)
        mean = hp.mean_constant + rbf_matrix(hp, Xstar, train.X) @ alpha
        return PosteriorPrediction(mean, np.full(len(Xstar), np.nan))
    raise ConfigError(f"unknown mode {mode!r}")


# --- checkpoints ------------------------------------------------------------------


def checkpoint_dict(cfg: TrainConfig, result: FitResult, model=None):
    return {
        "config": cfg.to_dict(),
        "model": model,
        "epoch": result.best_epoch,
        "params": result.best_params.to_json_dict(),
        "loss_history": result.loss_history,
    }


def save_checkpoint(path, cfg: TrainConfig, result: FitResult, model=None):
    atomic_write_text(path, json.dumps(checkpoint_dict(cfg, result, model)))


def load_checkpoint(path):
    """Returns ``(config, params, loss_history, epoch, model)``."""
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    return (TrainConfig.from_dict(d["config"]), DeepKernelParams.from_json_dict(d["params"]),
            d["loss_history"], d["epoch"], d.get("model"))
