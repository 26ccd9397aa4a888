"""Multi-bandwidth exponential kernel and the biased MMD^2 estimator.

    k(x, y) = sum_i exp(-alpha_i * r),   r = ||x - y||_2      (norm="l2")
                                         r = ||x - y||_2^2    (norm="sqeuclidean")

The estimator is the V-statistic with diagonal terms kept:

    mmd2(X, Y) = mean(K_xx) + mean(K_yy) - 2 mean(K_xy)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

NORM_MODES = ("l2", "sqeuclidean")


@dataclass(frozen=True)
class KernelConfig:
    alphas: tuple[float, ...] = (1.0, 0.1, 0.01)
    norm: str = "l2"

    def __post_init__(self):
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        if not self.alphas or any(not a > 0 for a in self.alphas):
            raise ValueError("kernel alphas must be a nonempty list of positive numbers")
        if self.norm not in NORM_MODES:
            raise ValueError(f"norm must be one of {NORM_MODES}, got {self.norm!r}")


class KernelCounter:
    """Tallies kernel evaluations performed by :func:`mmd2_hat`."""

    def __init__(self):
        self.evaluations = 0

    def add(self, n: int):
        self.evaluations += int(n)


def _as_samples(X, name="X") -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError(f"{name} must be a nonempty (n, d) sample matrix")
    return X


def _check_pair(X, Y):
    X, Y = _as_samples(X, "X"), _as_samples(Y, "Y")
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"embedding dims differ: {X.shape[1]} vs {Y.shape[1]}")
    return X, Y


def _distance(X, Y, cfg: KernelConfig) -> np.ndarray:
    sq = cdist(X, Y, "sqeuclidean")
    return np.sqrt(sq) if cfg.norm == "l2" else sq


def kernel_eval(x, y, cfg: KernelConfig = KernelConfig()) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    sq = float(np.sum((x - y) ** 2))
    r = np.sqrt(sq) if cfg.norm == "l2" else sq
    return float(sum(np.exp(-a * r) for a in cfg.alphas))


def kernel_matrix(X, Y, cfg: KernelConfig = KernelConfig()) -> np.ndarray:
    X, Y = _check_pair(X, Y)
    return _kernel_from_distance(_distance(X, Y, cfg), cfg)


def _kernel_from_distance(r, cfg):
    K = np.exp(-cfg.alphas[0] * r)
    for a in cfg.alphas[1:]:
        K += np.exp(-a * r)
    return K


def mmd2_hat(X, Y, cfg: KernelConfig = KernelConfig(), counter: KernelCounter | None = None) -> float:
    X, Y = _check_pair(X, Y)
    n1, n2 = len(X), len(Y)
    sxx = _kernel_from_distance(_distance(X, X, cfg), cfg).sum()
    syy = _kernel_from_distance(_distance(Y, Y, cfg), cfg).sum()
    sxy = _kernel_from_distance(_distance(X, Y, cfg), cfg).sum()
    if counter is not None:
        counter.add(n1 * n1 + n2 * n2 + n1 * n2)
    return float(sxx / (n1 * n1) + syy / (n2 * n2) - 2.0 * sxy / (n1 * n2))


def _fast_sqdist(X, Y):
    """Squared distances through one matrix product.

    Entries small relative to the row norms lose precision to cancellation,
    so those are recomputed from explicit differences.
    """
    xx = np.einsum("ij,ij->i", X, X)
    yy = np.einsum("ij,ij->i", Y, Y)
    sq = xx[:, None] + yy[None, :] - 2.0 * (X @ Y.T)
    scale = xx[:, None] + yy[None, :]
    redo = sq <= 1e-8 * scale
    if redo.any():
        i, j = np.nonzero(redo)
        d = X[i] - Y[j]
        sq[i, j] = np.einsum("ij,ij->i", d, d)
    return sq


def _phi(X, Y, cfg):
    """Kernel values and the scalar weights phi with dk/dx = phi * (x - y)."""
    sq = _fast_sqdist(X, Y)
    r = np.sqrt(sq) if cfg.norm == "l2" else sq
    K = np.zeros_like(r)
    dk = np.zeros_like(r)
    for a in cfg.alphas:
        e = np.exp(-a * r)
        K += e
        dk -= a * e
    if cfg.norm == "l2":
        with np.errstate(divide="ignore", invalid="ignore"):
            phi = np.where(r > 0, dk / r, 0.0)
    else:
        phi = 2.0 * dk
    return K, phi


def self_block(X, cfg: KernelConfig = KernelConfig()):
    """Kernel and gradient weights of ``X`` against itself, reusable across calls."""
    X = _as_samples(X)
    return _phi(X, X, cfg)


def mmd2_value_and_grad(X, Y, cfg: KernelConfig = KernelConfig(), xx=None):
    """``(mmd2, d/dX, d/dY)`` in one pass over the three kernel blocks.

    In ``l2`` mode the kernel is not differentiable where two samples
    coincide; those pairs contribute the zero vector.  ``xx`` may carry a
    precomputed :func:`self_block` of ``X``.
    """
    X, Y = _check_pair(X, Y)
    n1, n2 = len(X), len(Y)
    Kxx, Pxx = _phi(X, X, cfg) if xx is None else xx
    Kyy, Pyy = _phi(Y, Y, cfg)
    Kxy, Pxy = _phi(X, Y, cfg)
    value = Kxx.sum() / (n1 * n1) + Kyy.sum() / (n2 * n2) - 2.0 * Kxy.sum() / (n1 * n2)

    cxx, cyy, cxy = 2.0 / (n1 * n1), 2.0 / (n2 * n2), 2.0 / (n1 * n2)
    gX = cxx * (Pxx.sum(1)[:, None] * X - Pxx @ X) - cxy * (Pxy.sum(1)[:, None] * X - Pxy @ Y)
    gY = cyy * (Pyy.sum(1)[:, None] * Y - Pyy @ Y) - cxy * (Pxy.sum(0)[:, None] * Y - Pxy.T @ X)
    return float(value), gX, gY


def mmd2_grad(X, Y, cfg: KernelConfig = KernelConfig()):
    _, gX, gY = mmd2_value_and_grad(X, Y, cfg)
    return gX, gY


def subsample_indices(n_rows: int, n: int, seed) -> np.ndarray:
    """Row indices for :func:`subsample`."""
    if n < 1:
        raise ValueError("subsample size must be >= 1")
    rng = np.random.default_rng(seed)
    if n > n_rows:
        return rng.integers(0, n_rows, size=n)
    return rng.permutation(n_rows)[:n]


def subsample(X, n: int, seed) -> np.ndarray:
    """``n`` rows drawn uniformly, without replacement unless ``n`` exceeds the row count."""
    X = _as_samples(X)
    return X[subsample_indices(len(X), n, seed)]
