"""Numeric substrate: seeded random streams, small dense linear algebra and
the statistical kernels (softmax, k-NN distances, tied covariance) that the
detectors are built from.

Vectors and matrices are plain float64 numpy arrays; ``as_vector`` and
``as_matrix`` enforce shape and finiteness at the boundaries.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.spatial.distance import cdist

from .errors import DimensionMismatch, EmptyClass, NotPositiveDefinite, PoolTooSmall

COV_REG_SCALE = 1e-6

_MASK64 = (1 << 64) - 1


def as_vector(v, name="vector"):
    a = np.asarray(v, dtype=np.float64)
    if a.ndim != 1:
        raise DimensionMismatch(f"{name} must be 1-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


def as_matrix(m, name="matrix"):
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] == 0 or a.shape[1] == 0:
        raise DimensionMismatch(f"{name} must be a non-empty 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


def _splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream addressed by ``(seed, stream)``.

    Backed by the counter-based Philox generator keyed with both words, so
    every stream is independent and platform-stable. ``child`` derives a
    sub-stream deterministically from integer or string keys.
    """

    seed: int
    stream: int = 0

    def __post_init__(self):
        for name in ("seed", "stream"):
            v = getattr(self, name)
            if not 0 <= int(v) <= _MASK64:
                raise ValueError(f"{name} must fit in 64 unsigned bits, got {v}")

    def generator(self):
        bitgen = np.random.Philox(key=np.array([self.seed, self.stream], dtype=np.uint64))
        return np.random.Generator(bitgen)

    def child(self, *keys):
        s = self.stream
        for key in keys:
            if isinstance(key, str):
                h = 0
                for byte in key.encode("utf-8"):
                    h = _splitmix64(h ^ byte)
                key = h
            s = _splitmix64(s ^ _splitmix64(int(key) & _MASK64))
        return RngStream(self.seed, s)


def cholesky_factor(a):
    """Lower-triangular ``L`` with ``L @ L.T == a`` (Cholesky-Banachiewicz).

    Raises NotPositiveDefinite when a pivot is not strictly positive.
    """
    a = as_matrix(a, "A")
    n = a.shape[0]
    if a.shape[1] != n:
        raise DimensionMismatch(f"A must be square, got {a.shape}")
    if not np.allclose(a, a.T, rtol=1e-12, atol=1e-12 * max(1.0, np.abs(a).max())):
        raise ValueError("A must be symmetric")
    L = np.zeros_like(a)
    for i in range(n):
        row = L[i, :i]
        pivot = a[i, i] - row @ row
        if not pivot > 0.0:
            raise NotPositiveDefinite(f"pivot {i} is {pivot:.3e}")
        L[i, i] = np.sqrt(pivot)
        if i + 1 < n:
            L[i + 1:, i] = (a[i + 1:, i] - L[i + 1:, :i] @ row) / L[i, i]
    return L


def cholesky_solve(L, b):
    """Solve ``(L L^T) x = b`` given the lower factor; ``b`` may be a matrix of columns."""
    y = solve_triangular(L, b, lower=True, check_finite=False)
    return solve_triangular(L.T, y, lower=False, check_finite=False)


def solve_spd(a, b):
    b = np.asarray(b, dtype=np.float64)
    L = cholesky_factor(a)
    if b.shape[0] != L.shape[0]:
        raise DimensionMismatch(f"b has {b.shape[0]} rows, A is {L.shape[0]}x{L.shape[0]}")
    return cholesky_solve(L, b)


def softmax(z, temperature=1.0):
    """Temperature-scaled softmax over the last axis (max-subtracted)."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(z, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def pairwise_distances(queries, pool):
    """Euclidean distance matrix of shape (n_queries, n_pool).

    Differences are summed directly (no norm expansion), so identical
    vectors are exactly 0 apart.
    """
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    p = np.atleast_2d(np.asarray(pool, dtype=np.float64))
    if q.shape[1] != p.shape[1]:
        raise DimensionMismatch(f"query dim {q.shape[1]} != pool dim {p.shape[1]}")
    return cdist(q, p)


def nearest_indices(queries, pool, k):
    """Indices of the k nearest pool members per query, ties broken by pool order."""
    pool = np.atleast_2d(pool)
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    if k > pool.shape[0]:
        raise PoolTooSmall(f"k={k} exceeds pool size {pool.shape[0]}")
    dist = pairwise_distances(queries, pool)
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    return order, np.take_along_axis(dist, order, axis=1)


def kth_nearest_distances(queries, pool, k):
    _, d = nearest_indices(queries, pool, k)
    return d[:, k - 1]


def kth_nearest_distance(query, pool, k, metric="euclidean"):
    if metric != "euclidean":
        raise ValueError(f"unsupported metric {metric!r}")
    query = as_vector(query, "query")
    return float(kth_nearest_distances(query[None, :], pool, k)[0])


def mean_and_tied_covariance(features, labels):
    """Per-class means and the shared (tied) covariance of ``features``.

    The covariance is the pooled within-class scatter divided by N, plus a
    ridge of ``1e-6 * trace / d`` on the diagonal (``1e-6`` when the scatter
    is zero) so it is always positive definite.

    Returns ``(classes, means, cov)`` with ``means[i]`` belonging to ``classes[i]``.
    """
    x = as_matrix(features, "features")
    y = np.asarray(labels)
    if y.shape != (x.shape[0],):
        raise DimensionMismatch("labels must have one entry per feature row")
    classes = np.unique(y)
    if classes.size == 0:
        raise EmptyClass("no samples")
    d = x.shape[1]
    means = np.empty((classes.size, d))
    centered = np.empty_like(x)
    for i, c in enumerate(classes):
        mask = y == c
        means[i] = x[mask].mean(axis=0)
        centered[mask] = x[mask] - means[i]
    cov = centered.T @ centered / x.shape[0]
    cov = 0.5 * (cov + cov.T)
    tr = np.trace(cov)
    lam = COV_REG_SCALE * tr / d if tr > 0 else COV_REG_SCALE
    cov[np.diag_indices(d)] += lam
    return classes, means, cov


def mean_and_tied_covariance_groups(groups):
    """Same as ``mean_and_tied_covariance`` but takes ``[(class_id, vectors), ...]``."""
    feats, labels = [], []
    for cid, vecs in groups:
        vecs = np.atleast_2d(np.asarray(vecs, dtype=np.float64))
        if vecs.shape[0] == 0 or vecs.size == 0:
            raise EmptyClass(f"class {cid!r} has no vectors")
        feats.append(vecs)
        labels.extend([cid] * vecs.shape[0])
    if not feats:
        raise EmptyClass("no groups")
    return mean_and_tied_covariance(np.vstack(feats), np.asarray(labels))
