"""B-spline basis evaluation shared by the KAN layer and its VJP."""

import numpy as np


def uniform_knots(grid_size, order, lo, hi):
    """Uniform knot vector on ``[lo, hi]`` extended by ``order`` cells each side."""
    h = (hi - lo) / grid_size
    return lo + h * np.arange(-order, grid_size + order + 1, dtype=float)


def _full_recursion(x, t, order, derivative):
    x = x[..., None]
    B = ((x >= t[:-1]) & (x < t[1:])).astype(float)
    prev = B
    for k in range(1, order + 1):
        prev = B
        left = (x - t[: -k - 1]) / (t[k:-1] - t[: -k - 1]) * B[..., :-1]
        right = (t[k + 1:] - x) / (t[k + 1:] - t[1:-k]) * B[..., 1:]
        B = left + right
    if not derivative:
        return B
    if order == 0:
        return B, np.zeros_like(B)
    k = order
    dl = k / (t[k:-1] - t[: -k - 1]) * prev[..., :-1]
    dr = k / (t[k + 1:] - t[1:-k]) * prev[..., 1:]
    return B, dl - dr


def _local_bases(x, j, t, order):
    """The ``order + 1`` nonzero bases on cell ``j`` (triangular de Boor scheme)."""
    N = [np.ones_like(x)]
    prev = N
    for r in range(1, order + 1):
        prev = N
        new = []
        saved = np.zeros_like(x)
        for s in range(r):
            left = x - t[j + s + 1 - r]
            right = t[j + s + 1] - x
            temp = N[s] / (right + left)
            new.append(saved + right * temp)
            saved = left * temp
        new.append(saved)
        N = new
    return N, prev


def bspline_bases(x, knots, order, derivative=False):
    """Cox-de Boor evaluation of all B-spline basis functions at ``x``.

    ``x`` may have any shape; the result has an extra trailing axis of length
    ``len(knots) - order - 1``. Cells are half-open ``[t_j, t_{j+1})``. With
    ``derivative=True`` a pair ``(bases, d bases / dx)`` is returned.
    """
    x = np.asarray(x, dtype=float)
    t = np.asarray(knots, dtype=float)
    n_basis = len(t) - order - 1
    j = np.searchsorted(t, x, side="right") - 1
    if x.size == 0 or j.min() < order or j.max() > n_basis - 1:
        # some point lies near the ends of the knot vector, where fewer
        # than order + 1 bases are supported
        return _full_recursion(x, t, order, derivative)
    flat_x, flat_j = x.ravel(), j.ravel()
    N, prev = _local_bases(flat_x, flat_j, t, order)
    rows = np.arange(flat_x.size)[:, None]
    cols = flat_j[:, None] - order + np.arange(order + 1)
    B = np.zeros((flat_x.size, n_basis))
    B[rows, cols] = np.stack(N, axis=1)
    B = B.reshape(*x.shape, n_basis)
    if not derivative:
        return B
    dB = np.zeros((flat_x.size, n_basis))
    if order > 0:
        d_local = []
        for s in range(order + 1):
            i = flat_j - order + s
            term = np.zeros_like(flat_x)
            if s >= 1:
                term += order / (t[i + order] - t[i]) * prev[s - 1]
            if s < order:
                term -= order / (t[i + order + 1] - t[i + 1]) * prev[s]
            d_local.append(term)
        dB[rows, cols] = np.stack(d_local, axis=1)
    return B, dB.reshape(*x.shape, n_basis)
