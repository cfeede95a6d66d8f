"""MLP and efficient-KAN feature extractors.

A feature map sends ``d`` raw inputs to a low-dimensional latent space
(width 2 by default) that feeds the base kernel. Parameters are stored per
layer as dicts of arrays:

* MLP layer: ``weight`` (out x in), ``bias`` (out)
* KAN layer: ``base_weight`` (out x in), ``spline_scaler`` (out x in),
  ``spline_weight`` (out x in x (grid_size + spline_order))

Forward functions accept either arrays or traced :class:`~dkgp.autodiff.Var`
values for every parameter, so they double as gradient graphs.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from ._bspline import bspline_bases, uniform_knots
from .errors import InvalidKnots, ShapeMismatch, UnknownModel

#: Hidden widths of the benchmark architectures.
ARCHITECTURES = {
    "dkl-mlp": ("mlp", (1000, 500, 50)),
    "dkl-kan1": ("kan", (1000, 500, 50)),
    "dkl-kan2": ("kan", (256, 128, 64)),
}
MODEL_NAMES = ("gp",) + tuple(ARCHITECTURES)
LATENT_DIM = 2
# Kaiming-uniform negative slope used by efficient-KAN (and torch.nn.Linear)
KAIMING_A = math.sqrt(5)


@dataclass(frozen=True)
class FeatureSpec:
    kind: str
    layer_widths: tuple
    grid_size: int = 5
    spline_order: int = 3
    grid_range: tuple = (-1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        object.__setattr__(self, "grid_range", tuple(float(r) for r in self.grid_range))
        if self.kind not in ("mlp", "kan"):
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if len(self.layer_widths) < 2 or min(self.layer_widths) < 1:
            raise ValueError("layer_widths needs at least input and output widths, all >= 1")
        if self.grid_size < 1 or self.spline_order < 1:
            raise ValueError("grid_size and spline_order must be >= 1")
        lo, hi = self.grid_range
        if not lo < hi:
            raise ValueError("grid_range must be a nondegenerate interval")

    @property
    def in_dim(self):
        return self.layer_widths[0]

    @property
    def out_dim(self):
        return self.layer_widths[-1]

    @property
    def n_basis(self):
        return self.grid_size + self.spline_order

    def knots(self):
        return uniform_knots(self.grid_size, self.spline_order, *self.grid_range)

    def layer_shapes(self):
        return list(zip(self.layer_widths[:-1], self.layer_widths[1:]))

    def to_dict(self):
        d = asdict(self)
        d["layer_widths"] = list(self.layer_widths)
        d["grid_range"] = list(self.grid_range)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def feature_spec_for(model, d, hidden=None, latent_dim=LATENT_DIM, **kan_options):
    """FeatureSpec of a named model; ``None`` for the plain GP.

    ``hidden`` overrides the hidden widths of the named architecture.
    """
    if model == "gp":
        return None
    if model not in ARCHITECTURES:
        raise UnknownModel(f"unknown model {model!r}; expected one of {MODEL_NAMES}")
    kind, default_hidden = ARCHITECTURES[model]
    widths = (d, *(default_hidden if hidden is None else hidden), latent_dim)
    return FeatureSpec(kind, widths, **kan_options)


def feature_param_count(spec: FeatureSpec) -> int:
    if spec.kind == "mlp":
        return sum((i + 1) * o for i, o in spec.layer_shapes())
    per_edge = 2 + spec.grid_size + spec.spline_order
    return sum(i * o * per_edge for i, o in spec.layer_shapes())


def model_param_count(model, d, **kwargs) -> int:
    """Trainable parameters of a full model: feature map plus kernel hyperparameters.

    The kernel adds one lengthscale per base-kernel input, a signal variance,
    a noise variance and a constant mean.
    """
    spec = feature_spec_for(model, d, **kwargs)
    if spec is None:
        return d + 3
    return feature_param_count(spec) + spec.out_dim + 3


def bspline_basis(u, knots, order):
    """All B-spline basis values of degree ``order`` at a single point ``u``.

    Returns ``len(knots) - order - 1`` values; cells are half-open.
    """
    t = np.asarray(knots, dtype=float)
    if order < 0:
        raise InvalidKnots("order must be >= 0")
    if t.ndim != 1 or len(t) < order + 2 or np.any(np.diff(t) <= 0):
        raise InvalidKnots("knots must be strictly increasing with at least order + 2 entries")
    return bspline_bases(float(u), t, order)


@dataclass
class FeatureMapParams:
    spec: FeatureSpec
    layers: list
    seed: int | None = None

    _KEYS = {"mlp": ("weight", "bias"), "kan": ("base_weight", "spline_scaler", "spline_weight")}

    def flat(self, prefix="feature"):
        out = {}
        for i, layer in enumerate(self.layers):
            for k in self._KEYS[self.spec.kind]:
                out[f"{prefix}.{i}.{k}"] = layer[k]
        return out

    @classmethod
    def from_flat(cls, spec, flat, seed=None, prefix="feature"):
        layers = []
        for i in range(len(spec.layer_shapes())):
            layers.append({k: np.array(flat[f"{prefix}.{i}.{k}"], dtype=float)
                           for k in cls._KEYS[spec.kind]})
        return cls(spec, layers, seed)

    def n_params(self):
        return sum(int(np.size(v)) for v in self.flat().values())

    def to_json_dict(self):
        return {
            "spec": self.spec.to_dict(),
            "seed": self.seed,
            "layers": [
                {k: {"shape": list(np.shape(layer[k])),
                     "values": np.asarray(layer[k], float).ravel().tolist()}
                 for k in self._KEYS[self.spec.kind]}
                for layer in self.layers
            ],
        }

    @classmethod
    def from_json_dict(cls, d):
        spec = FeatureSpec.from_dict(d["spec"])
        layers = [
            {k: np.array(v["values"], dtype=float).reshape(v["shape"]) for k, v in layer.items()}
            for layer in d["layers"]
        ]
        return cls(spec, layers, d.get("seed"))

    def to_json(self):
        return json.dumps(self.to_json_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_json_dict(json.loads(text))


def _kaiming_uniform(rng, shape, fan_in, a=KAIMING_A):
    gain = math.sqrt(2.0 / (1.0 + a * a))
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_feature(spec: FeatureSpec, seed=0) -> FeatureMapParams:
    """Random initial parameters, deterministic in ``seed``.

    KAN layers start with a near-zero spline path: coefficients are drawn from
    ``U(-0.1, 0.1) / (grid_size + spline_order)``.
    """
    rng = np.random.default_rng(seed)
    layers = []
    for d_in, d_out in spec.layer_shapes():
        if spec.kind == "mlp":
            layers.append({
                "weight": _kaiming_uniform(rng, (d_out, d_in), d_in),
                "bias": np.zeros(d_out),
            })
        else:
            layers.append({
                "base_weight": _kaiming_uniform(rng, (d_out, d_in), d_in),
                "spline_scaler": _kaiming_uniform(rng, (d_out, d_in), d_in),
                "spline_weight": rng.uniform(-0.1, 0.1, size=(d_out, d_in, spec.n_basis))
                / spec.n_basis,
            })
    return FeatureMapParams(spec, layers, seed)


def _check_cols(X, d_in):
    if X.ndim != 2 or X.shape[1] != d_in:
        raise ShapeMismatch(f"expected input with {d_in} columns, got shape {X.shape}")


def kan_layer_forward(layer, X, spec: FeatureSpec, knots=None):
    """One efficient-KAN layer: ``silu`` base path plus scaled B-spline path.

    ``out[r, o] = sum_i base_weight[o, i] * silu(X[r, i])
    + spline_scaler[o, i] * sum_c spline_weight[o, i, c] * B_c(X[r, i])``
    """
    base_weight = layer["base_weight"]
    _check_cols(ad.value_of(X), ad.value_of(base_weight).shape[1])
    if knots is None:
        knots = spec.knots()
    base = ad.matmul(ad.silu(X), ad.transpose(base_weight))
    spline = ad.bspline_combine(X, layer["spline_weight"], layer["spline_scaler"],
                                knots, spec.spline_order)
    return ad.add(base, spline)


def mlp_forward(layers, X):
    """Affine layers with silu between them; the last layer is purely affine."""
    h = X
    for i, layer in enumerate(layers):
        _check_cols(ad.value_of(h), ad.value_of(layer["weight"]).shape[1])
        h = ad.add(ad.matmul(h, ad.transpose(layer["weight"])), layer["bias"])
        if i < len(layers) - 1:
            h = ad.silu(h)
    return h


def feature_forward(spec: FeatureSpec, layers, X):
    if spec.kind == "mlp":
        return mlp_forward(layers, X)
    knots = spec.knots()
    h = X
    for layer in layers:
        h = kan_layer_forward(layer, h, spec, knots)
    return h


def l1_penalty(spec: FeatureSpec, layers):
    """Sum of absolute weights (MLP weights; KAN base weights and spline coefficients)."""
    keys = ("weight",) if spec.kind == "mlp" else ("base_weight", "spline_weight")
    total = 0.0
    for layer in layers:
        for k in keys:
            total = ad.add(total, ad.sum(ad.abs(layer[k])))
    return total
