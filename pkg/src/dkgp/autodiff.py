"""Minimal tape-based reverse-mode automatic differentiation on numpy arrays.

Every primitive takes arrays or :class:`Var` objects. When none of the
inputs is traced the primitive simply returns a numpy array, so the same
model code serves both plain evaluation and gradient computation::

    tape = Tape()
    x = tape.leaf(np.array(3.0), "x")
    y = square(x)
    backward(y)["x"]        # -> 6.0
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import linalg
from ._bspline import bspline_bases
from .errors import NotScalar, ShapeMismatch


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable  # (*values, **static) -> (out, aux)
    vjp: Callable  # (g, out, aux, values, needs, **static) -> tuple of grads


class _Node:
    __slots__ = ("prim", "inputs", "in_values", "value", "aux", "static", "name")

    def __init__(self, prim, inputs, value, aux, static, name=None, in_values=()):
        self.prim = prim
        self.inputs = inputs
        self.in_values = in_values
        self.value = value
        self.aux = aux
        self.static = static
        self.name = name


class Tape:
    """Append-only record of primitive applications."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def leaf(self, value, name=None) -> "Var":
        value = np.array(value, dtype=float)
        self.nodes.append(_Node(None, (), value, None, {}, name))
        return Var(value, self, len(self.nodes) - 1)

    def leaves(self, params: Mapping[str, np.ndarray]) -> dict[str, "Var"]:
        return {k: self.leaf(v, k) for k, v in params.items()}

    def __len__(self):
        return len(self.nodes)


class Var:
    """A value recorded on a tape."""

    __slots__ = ("value", "tape", "index")
    __array_priority__ = 100  # make ndarray <op> Var defer to Var

    def __init__(self, value, tape, index):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return sum(self, axis=axis)

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return subtract(self, o)

    def __rsub__(self, o):
        return subtract(o, self)

    def __mul__(self, o):
        return multiply(self, o)

    def __rmul__(self, o):
        return multiply(o, self)

    def __neg__(self):
        return multiply(-1.0, self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __repr__(self):
        return f"Var(shape={self.shape}, node={self.index})"


def value_of(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


PRIMITIVES: dict[str, Primitive] = {}


def primitive(name):
    def register(cls):
        PRIMITIVES[name] = Primitive(name, cls.forward, cls.vjp)
        return cls

    return register


def record(name, *inputs, **static):
    """Apply primitive ``name`` to ``inputs``, recording it if any input is traced."""
    prim = PRIMITIVES[name]
    tape = None
    for x in inputs:
        if isinstance(x, Var):
            if tape is not None and x.tape is not tape:
                raise ValueError("inputs recorded on different tapes")
            tape = x.tape
    values = [value_of(x) for x in inputs]
    out, aux = prim.forward(*values, **static)
    if tape is None:
        return out
    ins = tuple(x if isinstance(x, Var) else None for x in inputs)
    tape.nodes.append(_Node(prim, ins, out, aux, static, in_values=values))
    return Var(out, tape, len(tape.nodes) - 1)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def backward(output: Var) -> dict:
    """Gradients of a scalar traced value with respect to every leaf.

    Returns a dict keyed by leaf name (or by tape index when unnamed).
    Leaves that the output does not depend on get zero gradients.
    """
    if not isinstance(output, Var):
        raise TypeError("output is not traced; nothing to differentiate")
    if output.value.size != 1:
        raise NotScalar(f"backward needs a scalar output, got shape {output.shape}")
    nodes = output.tape.nodes
    adj: list = [None] * (output.index + 1)
    adj[output.index] = np.ones_like(output.value)
    for i in range(output.index, -1, -1):
        node = nodes[i]
        g = adj[i]
        if g is None or node.prim is None:
            continue
        needs = tuple(v is not None for v in node.inputs)
        grads = node.prim.vjp(g, node.value, node.aux, node.in_values, needs, **node.static)
        for v, gi in zip(node.inputs, grads):
            if v is None or gi is None:
                continue
            gi = _unbroadcast(np.asarray(gi, dtype=float), v.value.shape)
            adj[v.index] = gi if adj[v.index] is None else adj[v.index] + gi
    result = {}
    for i, node in enumerate(nodes):
        if node.prim is None:
            g = adj[i] if i < len(adj) else None
            result[node.name if node.name is not None else i] = (
                np.zeros_like(node.value) if g is None else g)
    return result


def value_and_grad(f, params: Mapping[str, np.ndarray]):
    """Evaluate ``f(traced_params)`` and its gradient with respect to every entry."""
    tape = Tape()
    leaves = tape.leaves(params)
    out = f(leaves)
    if not isinstance(out, Var):
        return float(out), {k: np.zeros_like(np.asarray(v, float)) for k, v in params.items()}
    grads = backward(out)
    return float(out.value), {k: grads[k] for k in params}


def grad_check(f, params: Mapping[str, np.ndarray], step=1e-5, fd_fn=None):
    """Largest relative disagreement between autodiff and central differences.

    ``f`` maps a dict of (possibly traced) parameters to a scalar. The error
    for each scalar parameter is ``|ad - cd| / (|cd| + 1e-8)``; the maximum
    over all parameters is returned. Kinks or discontinuities at the probe
    point show up as large errors rather than exceptions.

    ``fd_fn`` optionally replaces ``f`` for the finite-difference evaluations,
    e.g. an extended-precision implementation of the same function. In double
    precision, central differences cannot resolve gradient entries much below
    ``ulp(f) / step``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = {k: np.array(v, dtype=float) for k, v in params.items()}
    _, grads = value_and_grad(f, params)
    fd = f if fd_fn is None else fd_fn
    worst = 0.0
    for name, base in params.items():
        flat = base.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = fd(params)
            flat[j] = orig - step
            fm = fd(params)
            flat[j] = orig
            cd = float((fp - fm) / (2 * step))
            ad = grads[name].reshape(-1)[j]
            worst = max(worst, float(np.abs(ad - cd) / (np.abs(cd) + 1e-8)))
    return worst


# ---------------------------------------------------------------------------
# primitives


def _shape_error(msg):
    return ShapeMismatch(msg)


def _check_broadcast(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise _shape_error(f"cannot broadcast {a.shape} with {b.shape}") from exc


@primitive("add")
class _Add:
    @staticmethod
    def forward(a, b):
        _check_broadcast(a, b)
        return a + b, None

    @staticmethod
    def vjp(g, out, aux, values, needs):
        return g, g


@primitive("subtract")
class _Subtract:
    @staticmethod
    def forward(a, b):
        _check_broadcast(a, b)
        return a - b, None

    @staticmethod
    def vjp(g, out, aux, values, needs):
        return g, -g


@primitive("multiply")
class _Multiply:
    @staticmethod
    def forward(a, b):
        _check_broadcast(a, b)
        return a * b, None

    @staticmethod
    def vjp(g, out, aux, values, needs):
        a, b = values
        return (g * b if needs[0] else None), (g * a if needs[1] else None)


@primitive("matmul")
class _Matmul:
    @staticmethod
    def forward(a, b):
        if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[0]:
            raise _shape_error(f"matmul of {a.shape} and {b.shape}")
        return a @ b, None

    @staticmethod
    def vjp(g, out, aux, values, needs):
        a, b = values
        ga = gb = None
        if needs[0]:
            ga = np.outer(g, b) if b.ndim == 1 and a.ndim == 2 else (
                g * b if b.ndim == 1 else g @ b.T)
        if needs[1]:
            gb = np.outer(a, g) if a.ndim == 1 and b.ndim == 2 else (
                g * a if a.ndim == 1 else a.T @ g)
        return ga, gb


@primitive("transpose")
class _Transpose:
    @staticmethod
    def forward(a):
        return a.T, None

    @staticmethod
    def vjp(g, out, aux, values, needs):
        return (g.T,)


@primitive("exp")
class _Exp:
    @staticmethod
    def forward(a):
        return np.exp(a), None

    @staticmethod
    def vjp(g, out, aux, values, needs):
        return (g * out,)


@primitive("log")
class _Log:
    @staticmethod
    def forward(a):
        return np.log(a), None

    @staticmethod
    def vjp(g, out, aux, values, needs):
        return (g / values[0],)


@primitive("square")
class _Square:
    @staticmethod
    def forward(a):
        return a * a, None

    @staticmethod
    def vjp(g, out, aux, values, needs):
        return (2.0 * g * values[0],)


@primitive("sum")
class _Sum:
    @staticmethod
    def forward(a, axis=None):
        return np.sum(a, axis=axis), None

    @staticmethod
    def vjp(g, out, aux, values, needs, axis=None):
        a = values[0]
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)


def _sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@primitive("abs")
class _Abs:
    @staticmethod
    def forward(a):
        return np.abs(a), None

    @staticmethod
    def vjp(g, out, aux, values, needs):
        return (g * np.sign(values[0]),)


@primitive("silu")
class _Silu:
    @staticmethod
    def forward(a):
        s = _sigmoid(np.atleast_1d(a)).reshape(a.shape)
        return a * s, s

    @staticmethod
    def vjp(g, out, s, values, needs):
        a = values[0]
        return (g * s * (1.0 + a * (1.0 - s)),)


@primitive("pairwise_sqdist")
class _PairwiseSqdist:
    """Squared Euclidean distances between the rows of two matrices.

    Uses ``|a|^2 + |b|^2 - 2 a.b`` clamped at zero. With ``symmetric=True``
    (both arguments are the same point set) the result is symmetrized and its
    diagonal zeroed exactly.
    """

    @staticmethod
    def forward(a, b, symmetric=False):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
            raise _shape_error(f"pairwise_sqdist of {a.shape} and {b.shape}")
        aa = np.sum(a * a, axis=1)
        bb = np.sum(b * b, axis=1)
        d = aa[:, None] + bb[None, :] - 2.0 * (a @ b.T)
        if symmetric:
            d = 0.5 * (d + d.T)
            np.fill_diagonal(d, 0.0)
        active = d > 0
        return np.where(active, d, 0.0), active

    @staticmethod
    def vjp(g, out, active, values, needs, symmetric=False):
        a, b = values
        g = g * active
        ga = gb = None
        if needs[0]:
            ga = 2.0 * (a * g.sum(axis=1)[:, None] - g @ b)
        if needs[1]:
            gb = 2.0 * (b * g.sum(axis=0)[:, None] - g.T @ a)
        return ga, gb


@primitive("bspline_combine")
class _BsplineCombine:
    """``out[r, o] = sum_i scaler[o, i] * sum_c coef[o, i, c] * B_c(clip(x[r, i]))``.

    Inputs are clamped to ``[knots[order], knots[-order-1]]`` (the grid range)
    before evaluating the basis, so the derivative with respect to an input
    outside the range is zero.
    """

    @staticmethod
    def forward(x, coef, scaler, knots=None, order=3):
        n, d_in = x.shape
        d_out = coef.shape[0]
        if coef.shape[:2] != (d_out, d_in) or scaler.shape != (d_out, d_in):
            raise _shape_error(
                f"bspline_combine: x {x.shape}, coef {coef.shape}, scaler {scaler.shape}")
        lo, hi = knots[order], knots[-order - 1]
        inside = (x >= lo) & (x <= hi)
        xc = np.clip(x, lo, np.nextafter(hi, lo))
        bases, dbases = bspline_bases(xc, knots, order, derivative=True)
        eff = (coef * scaler[..., None]).reshape(d_out, -1)
        out = bases.reshape(n, -1) @ eff.T
        return out, (bases, dbases, inside)

    @staticmethod
    def vjp(g, out, aux, values, needs, knots=None, order=3):
        bases, dbases, inside = aux
        x, coef, scaler = values
        n, d_in, n_basis = bases.shape
        d_out = coef.shape[0]
        gx = gcoef = gscaler = None
        if needs[1] or needs[2]:
            g_eff = (g.T @ bases.reshape(n, -1)).reshape(d_out, d_in, n_basis)
            if needs[1]:
                gcoef = g_eff * scaler[..., None]
            if needs[2]:
                gscaler = np.sum(g_eff * coef, axis=2)
        if needs[0]:
            eff = (coef * scaler[..., None]).reshape(d_out, -1)
            G = (g @ eff).reshape(n, d_in, n_basis)
            gx = np.sum(G * dbases, axis=2) * inside
        return gx, gcoef, gscaler


@primitive("cholesky_logdet_quadform")
class _CholeskyLogdetQuadform:
    """``y^T K^{-1} y + log|K|`` for SPD ``K``, fused.

    The VJP uses the closed-form derivative with respect to ``K``
    (``K^{-1} - K^{-1} y y^T K^{-1}``) instead of differentiating the
    factorization.
    """

    @staticmethod
    def forward(K, y):
        if K.ndim != 2 or K.shape[0] != K.shape[1] or y.shape != (K.shape[0],):
            raise _shape_error(f"cholesky_logdet_quadform of {K.shape} and {y.shape}")
        L = linalg.cholesky(K)
        alpha = linalg.cho_solve(L, y)
        return np.asarray(y @ alpha + linalg.logdet_from_cholesky(L)), (L, alpha)

    @staticmethod
    def vjp(g, out, aux, values, needs):
        from .gp import dnll_dK  # gp depends on this module

        L, alpha = aux
        K, y = values
        gK = 2.0 * g * dnll_dK(K, y, chol=L) if needs[0] else None
        gy = 2.0 * g * alpha if needs[1] else None
        return gK, gy


# thin public wrappers


def add(a, b):
    return record("add", a, b)


def subtract(a, b):
    return record("subtract", a, b)


def multiply(a, b):
    return record("multiply", a, b)


def matmul(a, b):
    return record("matmul", a, b)


def transpose(a):
    return record("transpose", a)


def exp(a):
    return record("exp", a)


def log(a):
    return record("log", a)


def square(a):
    return record("square", a)


def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    return record("sum", a, axis=axis)


def abs(a):  # noqa: A001
    return record("abs", a)


def silu(a):
    return record("silu", a)


def pairwise_sqdist(a, b, symmetric=False):
    return record("pairwise_sqdist", a, b, symmetric=symmetric)


def bspline_combine(x, coef, scaler, knots, order):
    return record("bspline_combine", x, coef, scaler, knots=np.asarray(knots, float),
                  order=int(order))


def cholesky_logdet_quadform(K, y):
    return record("cholesky_logdet_quadform", K, y)
