"""Kernel estimates of the Laplace-Beltrami operator on sampled functions.

All values returned here are uncalibrated: the unknown overall factor of
the Monte-Carlo estimate is fixed later from the tangential kernel matrix
(see :func:`splatgeom.manifold.calibration_scale`).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .spatial import SpatialIndex


class DuplicatePointsError(ValueError):
    """Every neighbor coincides with the center point."""


@dataclass(frozen=True)
class KernelWeights:
    center_id: int
    neighbor_ids: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if len(w) != len(self.neighbor_ids):
            raise ValueError("weights and neighbor_ids differ in length")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("weights must be finite and nonnegative")
        if len(w) and abs(w.sum() - 1) > 1e-9:
            raise ValueError("weights must sum to 1")


@dataclass(frozen=True)
class LocalFunction:
    value_at_center: float
    values_at_neighbors: np.ndarray

    def __add__(self, other: "LocalFunction") -> "LocalFunction":
        return LocalFunction(self.value_at_center + other.value_at_center,
                             np.asarray(self.values_at_neighbors) + other.values_at_neighbors)

    def __mul__(self, other):
        if isinstance(other, LocalFunction):
            return LocalFunction(self.value_at_center * other.value_at_center,
                                 np.asarray(self.values_at_neighbors) * other.values_at_neighbors)
        return LocalFunction(self.value_at_center * other, np.asarray(self.values_at_neighbors) * other)

    __rmul__ = __mul__


def gaussian_weights(sq_dist: np.ndarray, t: float) -> np.ndarray:
    """Row-normalized ``exp(-d^2 / t)`` for an array of squared distances.

    Subtracting the row minimum before exponentiating keeps the nearest
    neighbor's weight at 1 so small ``t`` cannot underflow a whole row.
    """
    sq_dist = np.asarray(sq_dist, dtype=float)
    z = -(sq_dist - sq_dist.min(axis=-1, keepdims=True)) / t
    w = np.exp(z)
    return w / w.sum(axis=-1, keepdims=True)


def _neighborhood(index: SpatialIndex, i: int, k: int):
    if k < 4:
        raise ValueError("k must be >= 4")
    nb = index.knn(i, k)
    if len(nb) and np.all(nb.distances == 0):
        raise DuplicatePointsError(f"all neighbors of point {i} coincide with it")
    return nb


def gaussian_kernel_weights(index: SpatialIndex, i: int, k: int, t: float) -> KernelWeights:
    """Gaussian kernel over the ``k`` nearest neighbors of point ``i``."""
    if not t > 0:
        raise ValueError("t must be positive")
    nb = _neighborhood(index, i, k)
    return KernelWeights(i, nb.indices, gaussian_weights(nb.distances**2, t))


def boost_covariances(cov: np.ndarray, xi_min: float) -> np.ndarray:
    """Raise every eigenvalue of each covariance to at least ``xi_min``."""
    lam, vec = np.linalg.eigh(np.asarray(cov, dtype=float))
    lam = np.maximum(lam, xi_min)
    return np.einsum("...ij,...j,...kj->...ik", vec, lam, vec)


def adaptive_bandwidth(cov_i: np.ndarray, cov_j: np.ndarray, t: float, xi_min: float) -> np.ndarray:
    """``t * sym(S_i S_j) + xi_min I``; broadcasts over leading axes."""
    prod = np.matmul(cov_i, cov_j)
    return t * (prod + np.swapaxes(prod, -1, -2)) / 2 + xi_min * np.eye(3)


def adaptive_quadratic_forms(diff: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """``d^T lam^-1 d`` per neighbor; raises if any ``lam`` is not PD."""
    if np.linalg.eigvalsh(lam).min() <= 0:
        raise np.linalg.LinAlgError("adaptive bandwidth matrix is not positive definite")
    sol = np.linalg.solve(lam, diff[..., None])[..., 0]
    return np.einsum("...d,...d->...", diff, sol)


def adaptive_kernel_weights(index: SpatialIndex, i: int, k: int, t: float,
                            covariances: np.ndarray, xi_min: float = 0.001) -> KernelWeights:
    """Covariance-adaptive kernel ``exp(-d^T L^-1 d)`` with ``L = t sym(S_i S_j) + xi_min I``.

    Covariances are boosted so their smallest eigenvalue is at least ``xi_min``.
    """
    if not t > 0:
        raise ValueError("t must be positive")
    nb = _neighborhood(index, i, k)
    cov = boost_covariances(covariances[np.r_[i, nb.indices]], xi_min)
    lam = adaptive_bandwidth(cov[0][None], cov[1:], t, xi_min)
    diff = index.positions[nb.indices] - index.positions[i]
    q = adaptive_quadratic_forms(diff, lam)
    return KernelWeights(i, nb.indices, gaussian_weights(q, 1.0))


def apply_laplacian(f: LocalFunction, w: KernelWeights, t: float) -> float:
    """Uncalibrated ``(1/t) sum_j w_j (f_j - f(q))``."""
    fj = np.asarray(f.values_at_neighbors, dtype=float)
    if len(fj) != len(w.weights):
        raise ValueError("function not paired with these weights")
    return float(np.dot(w.weights, fj - f.value_at_center) / t)


def leibniz_defect(f: LocalFunction, h: LocalFunction, w: KernelWeights, t: float) -> float:
    """``L[fh] - f L[h] - h L[f]`` in its product form ``(1/t) sum w (f_j-f)(h_j-h)``."""
    df = np.asarray(f.values_at_neighbors, dtype=float) - f.value_at_center
    dh = np.asarray(h.values_at_neighbors, dtype=float) - h.value_at_center
    if len(df) != len(w.weights) or len(dh) != len(w.weights):
        raise ValueError("functions not paired with these weights")
    return float(np.dot(w.weights, df * dh) / t)


def auto_bandwidth(kth_distances: np.ndarray, seed: int = 0, fraction: float = 0.01) -> float:
    """Bandwidth ``t`` = (mean k-th neighbor distance over a random sample)^2.

    ``kth_distances`` holds the k-th neighbor distance of every point; a
    ``fraction`` of them (at least one) is drawn with a seeded generator.
    """
    kth = np.asarray(kth_distances, dtype=float)
    m = max(1, int(round(fraction * len(kth))))
    sample = np.random.default_rng(seed).choice(len(kth), size=m, replace=False)
    r = kth[np.sort(sample)].mean()
    if not r > 0:
        raise DuplicatePointsError("cannot derive a bandwidth from coincident points")
    return float(r * r)
