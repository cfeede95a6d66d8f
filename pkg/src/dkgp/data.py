"""Datasets, ECDF input normalization, train/test partitioning and metrics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, EmptyFile, ParseError, RaggedRows, TooFewRows


@dataclass
class Dataset:
    name: str
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.X.shape[0] != self.y.shape[0]:
            raise DimensionMismatch(f"{self.X.shape[0]} input rows but {self.y.shape[0]} targets")
        if self.n < 2:
            raise TooFewRows(f"dataset {self.name!r} needs at least 2 rows, has {self.n}")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise ParseError(f"dataset {self.name!r} contains non-finite values")

    @property
    def n(self):
        return self.y.shape[0]

    @property
    def d(self):
        return self.X.shape[1]

    def subset(self, idx):
        return Dataset(self.name, self.X[idx], self.y[idx])


def load_csv(path, name=None) -> Dataset:
    """Read a comma-separated file with one header row; the last column is the target."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise EmptyFile(f"{path}: file is empty")
    header, body = rows[0], rows[1:]
    if len(header) < 2:
        raise EmptyFile(f"{path}: need at least one feature column and a target column")
    if not body:
        raise EmptyFile(f"{path}: no data rows")
    values = np.empty((len(body), len(header)))
    for i, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise RaggedRows(f"{path}: line {i} has {len(row)} cells, header has {len(header)}")
        for j, cell in enumerate(row):
            try:
                v = float(cell)
            except ValueError:
                v = math.nan
            if not math.isfinite(v):
                raise ParseError(
                    f"{path}: line {i}, column {header[j]!r}: cannot use {cell!r} as a finite number")
            values[i - 2, j] = v
    return Dataset(name or path.stem, values[:, :-1], values[:, -1])


def load_registry(path) -> dict:
    """JSON manifest mapping dataset names to CSV paths (relative to the manifest)."""
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        entries = json.load(fh)
    if not isinstance(entries, dict):
        raise ParseError(f"{path}: registry must be a JSON object of name -> path")
    return {name: (path.parent / p).resolve() for name, p in entries.items()}


# --- ECDF -----------------------------------------------------------------------


@dataclass
class EcdfMap:
    """Per-column lookup tables: unique training values and their Hazen positions."""

    columns: list  # sorted training values, one array per column
    knots: list
    levels: list

    @property
    def n(self):
        return len(self.columns[0])


def ecdf_fit(X_train) -> EcdfMap:
    X = np.atleast_2d(np.asarray(X_train, dtype=float))
    n = X.shape[0]
    columns, knots, levels = [], [], []
    for col in X.T:
        s = np.sort(col)
        uniq, first, counts = np.unique(s, return_index=True, return_counts=True)
        mean_rank = first + (counts + 1) / 2.0  # 1-based average position of each tie block
        columns.append(s)
        knots.append(uniq)
        levels.append((mean_rank - 0.5) / n)
    return EcdfMap(columns, knots, levels)


def ecdf_transform(emap: EcdfMap, X) -> np.ndarray:
    """Map each column to its Hazen plotting position, ``(rank - 0.5) / n``.

    Unseen values are linearly interpolated between neighbouring training
    values and clamped to ``[0.5/n, 1 - 0.5/n]`` outside the training range.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != len(emap.columns):
        raise DimensionMismatch(f"expected {len(emap.columns)} columns, got {X.shape[1]}")
    n = emap.n
    out = np.empty_like(X)
    for j in range(X.shape[1]):
        out[:, j] = np.interp(X[:, j], emap.knots[j], emap.levels[j],
                              left=0.5 / n, right=1 - 0.5 / n)
    return out


# --- partitioning and metrics ----------------------------------------------------


@dataclass(frozen=True)
class SplitPlan:
    k: int
    train_fraction: float
    seed: int
    splits: tuple  # ((train_idx, test_idx), ...)

    def __iter__(self):
        return iter(self.splits)

    def __len__(self):
        return len(self.splits)


def partition(n, k=5, train_fraction=0.9, seed=0) -> SplitPlan:
    """``k`` random train/test splits; split ``i`` shuffles with seed ``seed + i``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    n_train = int(round(train_fraction * n))
    if n_train >= n:
        raise TooFewRows(f"{n} rows at train fraction {train_fraction} leaves an empty test set")
    if n_train < 1:
        raise TooFewRows(f"{n} rows at train fraction {train_fraction} leaves no training rows")
    splits = []
    for i in range(k):
        perm = np.random.default_rng(seed + i).permutation(n)
        splits.append((np.sort(perm[:n_train]), np.sort(perm[n_train:])))
    return SplitPlan(k, train_fraction, seed, tuple(splits))


def rmse(predicted, actual) -> float:
    p = np.asarray(predicted, dtype=float).ravel()
    a = np.asarray(actual, dtype=float).ravel()
    if p.shape != a.shape or p.size == 0:
        raise DimensionMismatch(f"rmse needs equal nonempty lengths, got {p.size} and {a.size}")
    return float(np.sqrt(np.mean((p - a) ** 2)))


# --- synthetic data ---------------------------------------------------------------


def step_function(x):
    return (np.asarray(x) > 0).astype(float)


def step_data(seed=0, n_train=100, n_test=500, noise_std=0.01, test_range=(-5.0, 5.0)):
    """Noisy unit step: standard-normal training inputs, evenly spaced test inputs.

    Test targets are noise-free.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n_train)
    y = step_function(x) + noise_std * rng.standard_normal(n_train)
    xs = np.linspace(*test_range, n_test)
    return Dataset("step-train", x[:, None], y), Dataset("step-test", xs[:, None], step_function(xs))


def additive_data(n=1000, d=10, noise_std=0.1, seed=0):
    """Sum of three random smooth univariate functions plus one pairwise interaction.

    Inputs are uniform on [0, 1]^d. Returns the dataset and the noise-free target.
    """
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.0, 1.0, size=(n, d))
    cols = rng.choice(d, size=5, replace=False)
    freq = rng.uniform(1.0, 3.0, size=3)
    phase = rng.uniform(0.0, 2 * np.pi, size=3)
    amp = rng.uniform(0.5, 1.5, size=3)
    f = sum(amp[k] * np.sin(np.pi * freq[k] * X[:, cols[k]] + phase[k]) for k in range(3))
    f = f + 8.0 * (X[:, cols[3]] - 0.5) * (X[:, cols[4]] - 0.5)
    y = f + noise_std * rng.standard_normal(n)
    return Dataset(f"additive-{d}d", X, y), f
