"""Structured kernel interpolation (KISS-GP) and product-kernel SKIP.

KISS-GP replaces the n x n training covariance with ``W K_UU W^T`` where
``U`` is a regular product grid in latent space, ``K_UU`` is a Kronecker
product of small per-dimension RBF matrices and ``W`` holds local cubic
(Keys, a = -0.5) interpolation weights. SKIP handles many raw input
dimensions by multiplying one-dimensional SKI kernels elementwise, keeping
each factor as a rank-r Lanczos approximation.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import linalg
from .errors import DimensionMismatch, EmptyGrid, RankTooLarge, TooManyDims
from .gp import LOG_2PI, PosteriorPrediction, _clamp_variance
from .kernels import NOISE_FLOOR, SIGNAL_FLOOR, DeepKernelParams
from .linalg import SparseRowMatrix

log = logging.getLogger(__name__)

KEYS_A = -0.5
MAX_GRID_DIMS = 4
DENSE_LOGDET_MAX_N = 2000
CG_TOL = 1e-4
CG_MAX_ITER = 1000


@dataclass(frozen=True)
class Grid1D:
    lo: float
    hi: float
    m: int

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("grid needs lo < hi")
        if self.m < 4:
            raise ValueError("cubic interpolation needs at least 4 grid nodes per dimension")

    @property
    def spacing(self):
        return (self.hi - self.lo) / (self.m - 1)

    @property
    def nodes(self):
        return self.lo + self.spacing * np.arange(self.m)


@dataclass(frozen=True)
class ProductGrid:
    dims: tuple

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(self.dims))
        if not self.dims:
            raise EmptyGrid("grid has no dimensions")

    @property
    def shape(self):
        return tuple(g.m for g in self.dims)

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def ndim(self):
        return len(self.dims)

    def points(self):
        """All nodes, row-major (last dimension fastest), shape ``(size, ndim)``."""
        mesh = np.meshgrid(*[g.nodes for g in self.dims], indexing="ij")
        return np.stack([a.ravel() for a in mesh], axis=1)


def build_grid(Z, m_per_dim, padding_fraction=0.1):
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    D = Z.shape[1]
    if D > MAX_GRID_DIMS:
        raise TooManyDims(f"grid interpolation supports at most {MAX_GRID_DIMS} dims, got {D}")
    if m_per_dim < 4:
        raise ValueError("m_per_dim must be >= 4 for cubic interpolation")
    dims = []
    for d in range(D):
        zmin, zmax = float(Z[:, d].min()), float(Z[:, d].max())
        if zmax - zmin <= 1e-12 * max(1.0, abs(zmin)):
            lo, hi = zmin - 0.5, zmax + 0.5
        else:
            pad = padding_fraction * (zmax - zmin)
            lo, hi = zmin - pad, zmax + pad
        dims.append(Grid1D(lo, hi, int(m_per_dim)))
    return ProductGrid(tuple(dims))


def keys_kernel(s, a=KEYS_A):
    s = np.abs(s)
    out = np.zeros_like(s)
    inner = s <= 1
    outer = (s > 1) & (s < 2)
    si, so = s[inner], s[outer]
    out[inner] = (a + 2) * si**3 - (a + 3) * si**2 + 1
    out[outer] = a * so**3 - 5 * a * so**2 + 8 * a * so - 4 * a
    return out


def keys_kernel_deriv(s, a=KEYS_A):
    sign = np.sign(s)
    s = np.abs(s)
    out = np.zeros_like(s)
    inner = s <= 1
    outer = (s > 1) & (s < 2)
    si, so = s[inner], s[outer]
    out[inner] = 3 * (a + 2) * si**2 - 2 * (a + 3) * si
    out[outer] = 3 * a * so**2 - 10 * a * so + 8 * a
    return sign * out


def _interp_1d(z, grid: Grid1D, warn=True):
    """Stencil node indices, weights and d(weight)/dz for one dimension."""
    outside = (z < grid.lo) | (z > grid.hi)
    if np.any(outside):
        if warn:
            log.warning("%d point(s) outside the interpolation grid were clamped",
                        int(outside.sum()))
        z = np.clip(z, grid.lo, grid.hi)
    h = grid.spacing
    t = (z - grid.lo) / h
    near = np.round(t)
    t = np.where(np.abs(t - near) < 1e-12, near, t)  # snap on-node points to exact selections
    j = np.clip(np.floor(t), 0, grid.m - 2).astype(np.int64)
    frac = t - j
    offsets = np.arange(-1, 3)
    s = frac[:, None] - offsets[None, :]
    idx = j[:, None] + offsets[None, :]
    w = keys_kernel(s)
    dw = keys_kernel_deriv(s) / h
    dw[outside] = 0.0
    # stencil nodes beyond the grid fold onto the boundary node
    return np.clip(idx, 0, grid.m - 1), w, dw


def interp_weights(Z, grid: ProductGrid, with_grad=False, warn=True):
    """Sparse tensor-product cubic interpolation weights from points to grid nodes.

    Each row has at most ``4 ** D`` nonzeros and sums to one. With
    ``with_grad=True`` also returns, per latent dimension, the sparse matrix of
    derivatives of each weight with respect to that coordinate of its point.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if grid.size == 0:
        raise EmptyGrid("grid has no nodes")
    n, D = Z.shape
    if D != grid.ndim:
        raise DimensionMismatch(f"points have {D} dims, grid has {grid.ndim}")
    per_dim = [_interp_1d(Z[:, d], g, warn) for d, g in enumerate(grid.dims)]
    rows, cols, vals = [], [], []
    grads = [[] for _ in range(D)]
    for combo in itertools.product(range(4), repeat=D):
        col = np.zeros(n, dtype=np.int64)
        val = np.ones(n)
        for d, k in enumerate(combo):
            col = col * grid.dims[d].m + per_dim[d][0][:, k]
            val = val * per_dim[d][1][:, k]
        rows.append(np.arange(n))
        cols.append(col)
        vals.append(val)
        if with_grad:
            for dd in range(D):
                gval = np.ones(n)
                for d, k in enumerate(combo):
                    gval = gval * (per_dim[d][2][:, k] if d == dd else per_dim[d][1][:, k])
                grads[dd].append(gval)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    W = SparseRowMatrix.from_triplets(n, grid.size, rows, cols, np.concatenate(vals))
    if not with_grad:
        return W
    dWs = [SparseRowMatrix.from_triplets(n, grid.size, rows, cols, np.concatenate(g))
           for g in grads]
    return W, dWs


def unit_rbf_1d(nodes, lengthscale):
    diff = nodes[:, None] - nodes[None, :]
    return np.exp(-0.5 * (diff / lengthscale) ** 2)


def kron_mvm(factors, v):
    """``(A_1 kron ... kron A_D) v`` without forming the product.

    ``v`` may carry trailing columns: shape ``(prod sizes,)`` or ``(prod sizes, k)``.
    """
    shape = [A.shape[1] for A in factors]
    extra = v.shape[1:]
    V = v.reshape(*shape, *extra)
    for d, A in enumerate(factors):
        V = np.moveaxis(np.tensordot(A, V, axes=(1, d)), 0, d)
    return V.reshape(-1, *extra)


@dataclass
class KissGpModel:
    dk: DeepKernelParams
    grid: ProductGrid
    W: SparseRowMatrix
    Z: np.ndarray
    K_dims: list = field(default_factory=list)
    _eig: list | None = field(default=None, repr=False)

    @classmethod
    def build(cls, dk, X, m_per_dim=100, padding_fraction=0.1, grid=None, warn=True):
        Z = np.atleast_2d(dk.latent(np.asarray(X, float)))
        if grid is None:
            grid = build_grid(Z, m_per_dim, padding_fraction)
        W = interp_weights(Z, grid, warn=warn)
        return cls(dk, grid, W, Z, _grid_kernels(grid, dk.base.lengthscales))

    @property
    def n(self):
        return self.W.rows

    @property
    def signal_variance(self):
        return self.dk.base.signal_variance

    @property
    def noise_variance(self):
        return self.dk.base.noise_variance

    def kuu_mvm(self, u):
        return self.signal_variance * kron_mvm(self.K_dims, u)

    def eigen(self):
        """Cached per-dimension eigendecompositions of the grid kernels."""
        if self._eig is None:
            self._eig = [linalg.sym_eigen(K) for K in self.K_dims]
        return self._eig

    def dense_ski(self):
        """``W K_UU W^T`` as a dense n x n matrix (oracle / small-n use only)."""
        Wt = self.W.to_scipy().T.toarray()
        return self.W.to_scipy() @ self.kuu_mvm(Wt)


def _grid_kernels(grid, lengthscales):
    if len(lengthscales) != grid.ndim:
        raise DimensionMismatch(
            f"{len(lengthscales)} lengthscales for a {grid.ndim}-dimensional grid")
    return [unit_rbf_1d(g.nodes, ell) for g, ell in zip(grid.dims, lengthscales)]


def kiss_mvm(model: KissGpModel, v):
    """``(W K_UU W^T + noise I) v``."""
    v = np.asarray(v, dtype=float)
    if v.shape[0] != model.n:
        raise DimensionMismatch(f"expected length {model.n}, got {v.shape[0]}")
    return model.W.matvec(model.kuu_mvm(model.W.rmatvec(v))) + model.noise_variance * v


def _kron_eigenvalues(eigvals, sf2):
    lam = np.array([sf2])
    for w in eigvals:
        lam = np.multiply.outer(lam, np.clip(w, 0.0, None)).ravel()
    return lam


def _approx_logdet(n, lam, noise):
    """Scaled-eigenvalue log-determinant of ``W K_UU W^T + noise I``."""
    M = lam.size
    top = np.sort(lam)[::-1][: min(n, M)]
    return float(np.sum(np.log((n / M) * top + noise)) + max(n - M, 0) * math.log(noise))


def kiss_nll(model: KissGpModel, y, logdet="auto", tol=CG_TOL, max_iter=CG_MAX_ITER):
    """Negative log marginal likelihood under the KISS-GP covariance.

    The quadratic form uses conjugate gradients on :func:`kiss_mvm`. The
    log-determinant is exact (dense Cholesky of the SKI matrix) when
    ``logdet="exact"``, or ``"auto"`` with n <= 2000; otherwise it is the
    scaled Kronecker-eigenvalue approximation.
    """
    y = np.asarray(y, dtype=float)
    n = model.n
    r = y - model.dk.base.mean_constant
    alpha = linalg.conjugate_gradient(lambda v: kiss_mvm(model, v), r, tol, max_iter)
    quad = float(r @ alpha)
    noise = model.noise_variance
    if logdet == "exact" or (logdet == "auto" and n <= DENSE_LOGDET_MAX_N):
        L = linalg.cholesky(model.dense_ski() + noise * np.eye(n))
        ld = linalg.logdet_from_cholesky(L)
    elif logdet in ("eigen", "auto"):
        lam = _kron_eigenvalues([w for w, _ in model.eigen()], model.signal_variance)
        ld = _approx_logdet(n, lam, noise)
    else:
        raise ValueError(f"unknown logdet mode {logdet!r}")
    return 0.5 * (quad + ld + n * LOG_2PI)


def kiss_predict(model: KissGpModel, y, Zstar, tol=1e-8, max_iter=None, variance=True):
    """Predictive mean and latent variance at latent test points ``Zstar``.

    Each variance costs one CG solve; ``variance=False`` skips them and
    reports NaN.
    """
    y = np.asarray(y, dtype=float)
    n = model.n
    max_iter = max_iter or 10 * n
    c = model.dk.base.mean_constant
    sf2 = model.signal_variance
    Ws = interp_weights(np.atleast_2d(Zstar), model.grid)
    mvm = lambda v: kiss_mvm(model, v)  # noqa: E731
    alpha = linalg.conjugate_gradient(mvm, y - c, tol, max_iter)
    mean = c + Ws.matvec(model.kuu_mvm(model.W.rmatvec(alpha)))
    if not variance:
        return PosteriorPrediction(mean, np.full(Ws.rows, np.nan))
    # cross-covariances with the training points, one column per test point
    Q = model.W.to_scipy() @ model.kuu_mvm(Ws.to_scipy().T.toarray())
    var = np.empty(Ws.rows)
    for i in range(Ws.rows):
        q = Q[:, i]
        var[i] = sf2 - q @ linalg.conjugate_gradient(mvm, q, tol, max_iter)
    return PosteriorPrediction(mean, _clamp_variance(var, sf2))


# --- training objective with gradients ---------------------------------------


@ad.primitive("kiss_nll")
class _KissNll:
    """KISS-GP NLL as a function of (latent points, log lengthscales,
    log signal variance, log noise variance, mean constant).

    The grid is fixed (static); interpolation weights are differentiated
    through the Keys kernel. Gradients of the approximate log-determinant with
    respect to latent points are zero in eigen mode.
    """

    @staticmethod
    def forward(Z, log_l, log_sf2, log_noise, c, grid=None, y=None, logdet="auto",
                tol=CG_TOL, max_iter=CG_MAX_ITER):
        n, D = Z.shape
        W, dWs = interp_weights(Z, grid, with_grad=True, warn=False)
        ell = np.exp(log_l)
        K_dims = _grid_kernels(grid, ell)
        sf2 = max(float(np.exp(log_sf2)), SIGNAL_FLOOR)
        noise_raw = float(np.exp(log_noise))
        noise = max(noise_raw, NOISE_FLOOR)
        Ws = W.to_scipy()

        def kuu(u):
            return sf2 * kron_mvm(K_dims, u)

        def mvm(v):
            return Ws @ kuu(Ws.T @ v) + noise * v

        r = y - c
        alpha = linalg.conjugate_gradient(mvm, r, tol, max_iter)
        beta = Ws.T @ alpha
        Kbeta = kuu(beta)
        quad = float(r @ alpha)

        # derivative grid kernels: d K_d / d log l_d
        nodes = [g.nodes for g in grid.dims]
        dK_dims = [K * ((u[:, None] - u[None, :]) / e) ** 2 for K, u, e in zip(K_dims, nodes, ell)]

        g_Z = np.zeros((n, D))
        g_l = np.zeros(D)
        for d in range(D):
            g_Z[:, d] = -2.0 * alpha * (dWs[d].to_scipy() @ Kbeta)
            facs = [dK_dims[k] if k == d else K_dims[k] for k in range(D)]
            g_l[d] = -sf2 * beta @ kron_mvm(facs, beta)
        g_sf2 = -float(beta @ Kbeta) if sf2 > SIGNAL_FLOOR else 0.0
        g_noise = -noise * float(alpha @ alpha) if noise_raw >= NOISE_FLOOR else 0.0
        g_c = -2.0 * float(np.sum(alpha))

        if logdet == "exact" or (logdet == "auto" and n <= DENSE_LOGDET_MAX_N):
            Wt = Ws.T.toarray()
            KWt = kuu(Wt)  # M x n
            A = Ws @ KWt + noise * np.eye(n)
            L = linalg.cholesky(A)
            ld = linalg.logdet_from_cholesky(L)
            A_inv = linalg.cho_solve(L, np.eye(n))
            for d in range(D):
                facs = [dK_dims[k] if k == d else K_dims[k] for k in range(D)]
                dB = Ws @ (sf2 * kron_mvm(facs, Wt))
                g_l[d] += float(np.sum(A_inv * dB))
            if sf2 > SIGNAL_FLOOR:
                g_sf2 += float(np.sum(A_inv * (A - noise * np.eye(n))))
            if noise_raw >= NOISE_FLOOR:
                g_noise += noise * float(np.trace(A_inv))
            # d logdet / dz_{i,d} = 2 (A^-1 W K)[i, :] . dW_d[i, :]
            for d in range(D):
                dW = dWs[d]
                rows = np.repeat(np.arange(n), dW.row_nnz())
                cols = dW.col_indices
                contrib = np.empty(len(cols))
                step = max(1, 4_000_000 // max(n, 1))
                for s0 in range(0, len(cols), step):
                    sl = slice(s0, s0 + step)
                    contrib[sl] = np.einsum("tk,kt->t", A_inv[rows[sl]], KWt[cols[sl]].T)
                g_Z[:, d] += 2.0 * np.bincount(rows, weights=contrib * dW.values, minlength=n)
        else:
            eig = [linalg.sym_eigen(K) for K in K_dims]
            lam = _kron_eigenvalues([w for w, _ in eig], sf2)
            M = lam.size
            order = np.argsort(lam)[::-1][: min(n, M)]
            ld = _approx_logdet(n, lam, noise)
            denom = (n / M) * lam[order] + noise
            shape = tuple(g.m for g in grid.dims)
            multi = np.unravel_index(order, shape)
            for d in range(D):
                w_d, V_d = eig[d]
                dlam_d = np.sum(V_d * (dK_dims[d] @ V_d), axis=0)
                w_sel = w_d[multi[d]]
                ratio = np.where(w_sel > 0, dlam_d[multi[d]] / np.where(w_sel > 0, w_sel, 1.0), 0.0)
                g_l[d] += float(np.sum((n / M) * lam[order] * ratio / denom))
            if sf2 > SIGNAL_FLOOR:
                g_sf2 += float(np.sum((n / M) * lam[order] / denom))
            if noise_raw >= NOISE_FLOOR:
                g_noise += noise * float(np.sum(1.0 / denom) + max(n - M, 0) / noise)
        value = 0.5 * (quad + ld + n * LOG_2PI)
        grads = tuple(0.5 * g for g in (g_Z, g_l, np.asarray(g_sf2), np.asarray(g_noise),
                                        np.asarray(g_c)))
        return np.asarray(value), grads

    @staticmethod
    def vjp(g, out, grads, values, needs, **static):
        return tuple(g * gi if need else None for gi, need in zip(grads, needs))


def kiss_nll_graph(p, spec, X, y, grid, logdet="auto", tol=CG_TOL, max_iter=CG_MAX_ITER):
    """Traceable KISS-GP NLL built from a flat parameter dict on a fixed grid."""
    from .kernels import latent_graph

    Z = latent_graph(p, spec, X)
    return ad.record("kiss_nll", Z, p["kernel.log_lengthscales"], p["kernel.log_signal_variance"],
                     p["kernel.log_noise_variance"], p["kernel.mean_constant"], grid=grid,
                     y=np.asarray(y, float), logdet=logdet, tol=tol, max_iter=max_iter)


# --- SKIP ---------------------------------------------------------------------


@dataclass
class SkiFactor:
    """One-dimensional SKI kernel ``W K_UU W^T`` for a single input column."""

    W: SparseRowMatrix
    K_uu: np.ndarray

    @property
    def n(self):
        return self.W.rows

    def mvm(self, v):
        return self.W.matvec(self.K_uu @ self.W.rmatvec(v))

    def dense(self):
        Ws = self.W.to_scipy()
        return Ws @ (self.K_uu @ Ws.T.toarray())


def ski_factors(X, lengthscales, m_per_dim=100, padding_fraction=0.1, grids=None):
    """Unit-variance per-column SKI factors for raw inputs ``X`` (n x d)."""
    X = np.asarray(X, dtype=float)
    factors = []
    for d in range(X.shape[1]):
        grid = build_grid(X[:, [d]], m_per_dim, padding_fraction) if grids is None else grids[d]
        W = interp_weights(X[:, [d]], grid, warn=grids is None)
        factors.append(SkiFactor(W, unit_rbf_1d(grid.dims[0].nodes, lengthscales[d])))
    return factors


@dataclass
class LowRank:
    """Symmetric ``U diag(lam) U^T``."""

    U: np.ndarray
    lam: np.ndarray

    def mvm(self, v):
        return self.U @ (self.lam * (self.U.T @ v))


def _seed_vector(n, seed=0):
    return np.random.default_rng(seed).standard_normal(n)


def _to_low_rank(mvm, n, rank, seed=0):
    # one power step puts the start vector in the range of the operator, so a
    # rank-k operator is captured exactly at rank k
    start = mvm(_seed_vector(n, seed))
    if not np.any(start):
        return LowRank(np.zeros((n, 1)), np.zeros(1))
    res = linalg.lanczos(mvm, start, rank)
    theta, S = res.T.eigh()
    return LowRank(res.Q @ S, theta)


def _hadamard_mvm(A: LowRank, B: LowRank, v):
    """``(A o B) v`` for low-rank symmetric A, B."""
    out = np.zeros_like(v)
    for a in range(A.U.shape[1]):
        u = A.U[:, a]
        out += A.lam[a] * u * B.mvm(u * v)
    return out


class SkipOperator:
    """Matrix-free ``(K_1 o K_2 o ... o K_d) v`` from per-dimension SKI factors.

    Factors are merged left to right; each factor and each intermediate
    product is kept as a rank-``rank`` Lanczos approximation.
    """

    def __init__(self, factors, rank, seed=0):
        if not factors:
            raise ValueError("need at least one factor")
        n = factors[0].n
        if any(f.n != n for f in factors):
            raise DimensionMismatch("all SKI factors must share n")
        if rank < 1:
            raise ValueError("lanczos rank must be >= 1")
        if rank > n:
            raise RankTooLarge(f"rank {rank} exceeds n = {n}")
        self.n = n
        self.rank = rank
        self.factors = factors
        self._single = factors[0] if len(factors) == 1 else None
        if self._single is None:
            current = _to_low_rank(factors[0].mvm, n, rank, seed)
            for f in factors[1:-1]:
                nxt = _to_low_rank(f.mvm, n, rank, seed)
                cur = current
                current = _to_low_rank(lambda v, a=cur, b=nxt: _hadamard_mvm(a, b, v), n, rank,
                                       seed)
            self._left = current
            self._right = _to_low_rank(factors[-1].mvm, n, rank, seed)

    def mvm(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.n:
            raise DimensionMismatch(f"expected length {self.n}, got {v.shape[0]}")
        if self._single is not None:
            return self._single.mvm(v)
        return _hadamard_mvm(self._left, self._right, v)


def skip_mvm(per_dim_ski, lanczos_rank, v, seed=0):
    return SkipOperator(per_dim_ski, lanczos_rank, seed).mvm(v)


def skip_nll(X, y, log_lengthscales, log_signal_variance, log_noise_variance, mean_constant,
             grids, rank, tol=CG_TOL, max_iter=CG_MAX_ITER):
    """GP NLL with a SKIP covariance on raw inputs.

    Quadratic form by CG; log-determinant from the Lanczos spectrum of the
    product operator plus ``(n - rank) log(noise)``.
    """
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    n = len(y)
    sf2 = max(float(np.exp(log_signal_variance)), SIGNAL_FLOOR)
    noise = max(float(np.exp(log_noise_variance)), NOISE_FLOOR)
    op = SkipOperator(ski_factors(X, np.exp(log_lengthscales), grids=grids), min(rank, n))

    def mvm(v):
        return sf2 * op.mvm(v) + noise * v

    r = y - mean_constant
    alpha = linalg.conjugate_gradient(mvm, r, tol, max_iter)
    spec_op = _to_low_rank(op.mvm, n, min(rank, n))
    theta = np.clip(spec_op.lam, 0.0, None) * sf2
    ld = float(np.sum(np.log(theta + noise)) + (n - len(theta)) * math.log(noise))
    return 0.5 * (float(r @ alpha) + ld + n * LOG_2PI)
