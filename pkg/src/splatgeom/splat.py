"""Geometry-constrained operations on Gaussian splats.

Covers covariance warm-up from curvature, flat-region upsampling, the
normal-truncated position update, the scale and rotation regularizers,
and the split and clone placement rules. Every ratio or denominator
involving curvature uses clamped ``|tau|`` values.

The update rules accept either a single frame or arrays of frames: any
object with ``u1, u2, n`` attributes of shape (3,) or (N, 3) works.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .spatial import SpatialIndex
from .types import CurvatureInfo, LocalFrame, PointCloud


@dataclass(frozen=True)
class ClampedCurvature:
    t1: float
    t2: float

    @property
    def ratio(self) -> float:
        return self.t1 / self.t2


@dataclass(frozen=True)
class RegularizerResult:
    loss: float
    grad_scales: Optional[np.ndarray] = None
    grad_rotation: Optional[np.ndarray] = None


def neighbor_scale(index: SpatialIndex, i: int, k: int = 3) -> float:
    """Mean distance from point ``i`` to its ``k`` nearest neighbors."""
    if k < 1:
        raise ValueError("k must be >= 1")
    nb = index.knn(i, k)
    if len(nb) == 0:
        raise ValueError(f"point {i} is isolated")
    return float(nb.distances.mean())


def neighbor_scales(index: SpatialIndex, k: int = 3) -> np.ndarray:
    """Batch :func:`neighbor_scale` for every indexed point."""
    dist, _ = index.knn_all(k)
    if dist.shape[1] == 0:
        raise ValueError("cloud has a single point")
    return dist.mean(axis=1)


def clamp_curvature(tau1, tau2, xi_min: float, xi_max: float) -> ClampedCurvature:
    """``min(max(|tau|, xi_min), xi_max)`` per value, ordered ``t1 >= t2``."""
    if not xi_min < xi_max:
        raise ValueError("xi_min must be below xi_max")
    a = min(max(abs(float(tau1)), xi_min), xi_max)
    b = min(max(abs(float(tau2)), xi_min), xi_max)
    return ClampedCurvature(max(a, b), min(a, b))


def clamp_curvatures(tau: np.ndarray, xi_min: float, xi_max: float) -> np.ndarray:
    """Batch clamp of an (N, 2) array; columns ordered descending."""
    t = np.clip(np.abs(tau), xi_min, xi_max)
    return np.sort(t, axis=1)[:, ::-1]


def auto_xi_max(tau: np.ndarray) -> float:
    """Mean plus three standard deviations of ``|tau|`` over a batch."""
    a = np.abs(np.asarray(tau, dtype=float)).ravel()
    a = a[np.isfinite(a)]
    return float(a.mean() + 3 * a.std()) if len(a) else float("inf")


def mac(curv) -> float:
    """Mean absolute curvature of a :class:`CurvatureInfo` or a ``(tau1, tau2)`` pair."""
    if isinstance(curv, CurvatureInfo):
        return curv.mac
    t1, t2 = curv
    return (abs(t1) + abs(t2)) / 2


def _rotation_from_columns(c1, c2, c3) -> np.ndarray:
    r1 = c1 / np.linalg.norm(c1)
    r2 = c2 - np.dot(c2, r1) * r1
    r2 /= np.linalg.norm(r2)
    r3 = c3 - np.dot(c3, r1) * r1 - np.dot(c3, r2) * r2
    r3 /= np.linalg.norm(r3)
    R = np.column_stack([r1, r2, r3])
    if np.linalg.det(R) < 0:
        R[:, 2] = -R[:, 2]
    return R


def warmup_covariance(frame: LocalFrame, curv: CurvatureInfo, s_nbr: float,
                      xi_min: float, xi_max: float) -> tuple[np.ndarray, np.ndarray]:
    """Initial rotation and scales from the curvature prior.

    Columns of ``R`` are ``(w2, w1, n)``; scales are
    ``(s_nbr/2 sqrt(t1/t2), s_nbr/2 sqrt(t2/t1), xi_min)`` from the clamped
    curvatures, so ``s1 s2 = (s_nbr/2)^2`` and ``s1 / s2 = t1 / t2``.
    """
    if not s_nbr > 0:
        raise ValueError("s_nbr must be positive")
    cc = clamp_curvature(curv.tau1, curv.tau2, xi_min, xi_max)
    half = s_nbr / 2
    s1 = half * np.sqrt(cc.t1 / cc.t2)
    s2 = half * np.sqrt(cc.t2 / cc.t1)
    R = _rotation_from_columns(np.asarray(curv.w2), np.asarray(curv.w1), np.asarray(frame.n))
    return R, np.array([s1, s2, xi_min])


def upsample_flat_regions(cloud: PointCloud, macs: np.ndarray, xi_min: float, k: int = 10,
                          index: Optional[SpatialIndex] = None):
    """Midpoints between each flat point (MAC below ``xi_min``) and its ``k`` neighbors.

    Returns ``(positions, colors, parents)`` where ``parents`` holds the
    pair of source indices of every new point and ``colors`` is None when
    the cloud has none. Midpoints that coincide within 1e-9 are emitted
    once, keeping the first in (source, neighbor) order.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    P = cloud.positions
    flat = np.flatnonzero(np.asarray(macs) < xi_min)
    empty = (np.zeros((0, 3)), None if cloud.colors is None else np.zeros((0, 3)),
             np.zeros((0, 2), dtype=np.int64))
    if len(flat) == 0 or len(P) < 2:
        return empty
    index = index or SpatialIndex(P)
    _, idx = index.knn_all(k)
    src = np.repeat(flat, idx.shape[1])
    dst = idx[flat].ravel()
    mid = (P[src] + P[dst]) / 2
    keep = _first_of_clusters(mid, 1e-9)
    parents = np.c_[src, dst][keep]
    colors = None if cloud.colors is None else (cloud.colors[src] + cloud.colors[dst])[keep] / 2
    return mid[keep], colors, parents


def _first_of_clusters(points: np.ndarray, tol: float) -> np.ndarray:
    """Mask keeping the lowest index of each group of points within ``tol`` (single linkage)."""
    pairs = cKDTree(points).query_pairs(tol, output_type="ndarray")
    keep = np.ones(len(points), dtype=bool)
    if len(pairs) == 0:
        return keep
    n = len(points)
    g = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(g, directed=False)
    first = np.full(labels.max() + 1, n)
    np.minimum.at(first, labels, np.arange(n))
    return first[labels] == np.arange(n)


def _split_components(v, frame):
    u1, u2, n = (np.asarray(getattr(frame, a), dtype=float) for a in ("u1", "u2", "n"))
    v = np.asarray(v, dtype=float)
    tang = np.sum(v * u1, axis=-1, keepdims=True) * u1 + np.sum(v * u2, axis=-1, keepdims=True) * u2
    norm_c = np.sum(v * n, axis=-1, keepdims=True) * n
    return tang, norm_c


def _truncation_factor(normal_part, xi_min):
    mag = np.linalg.norm(normal_part, axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        return np.where(mag > 0, np.minimum(xi_min / np.where(mag > 0, mag, 1.0), 1.0), 1.0)


def truncated_gradient_step(mu, grad, frame, omega: float, xi_min: float) -> np.ndarray:
    """``mu - omega (g_tan + min(xi_min / |g_nrm|, 1) g_nrm)``."""
    if not omega > 0:
        raise ValueError("omega must be positive")
    tang, nrm = _split_components(grad, frame)
    return np.asarray(mu, dtype=float) - omega * (tang + _truncation_factor(nrm, xi_min) * nrm)


def clone_primitive(mu, accum_grad, frame, xi_min: float) -> np.ndarray:
    """``mu + g_tan + min(xi_min / |g_nrm|, 1) g_nrm`` for an accumulated gradient."""
    tang, nrm = _split_components(accum_grad, frame)
    return np.asarray(mu, dtype=float) + tang + _truncation_factor(nrm, xi_min) * nrm


def split_primitive(mu, frame, curv: CurvatureInfo, clamped: ClampedCurvature, rho,
                    xi_min: float) -> np.ndarray:
    """``mu + (rho2/t2) w2 + (rho1/t1) w1 + rho3 xi_min n``.

    ``rho`` may be a 3-vector or an (M, 3) batch of draws.
    """
    rho = np.asarray(rho, dtype=float)
    off = (rho[..., 1:2] / clamped.t2) * curv.w2 + (rho[..., 0:1] / clamped.t1) * curv.w1 \
        + (rho[..., 2:3] * xi_min) * np.asarray(frame.n)
    return np.asarray(mu, dtype=float) + off


def scale_regularizer(s1: float, s2: float, s3: float, clamped: ClampedCurvature,
                      xi_min: float) -> RegularizerResult:
    """Hinge ``max(0, s1/s2 - t1/t2 - xi_min) + s3^2`` with its gradient."""
    if not (s1 > 0 and s2 > 0):
        raise ValueError("s1 and s2 must be positive")
    margin = s1 / s2 - clamped.ratio - xi_min
    loss = max(0.0, margin) + s3 * s3
    if margin > 0:
        grad = np.array([1 / s2, -s1 / (s2 * s2), 2 * s3])
    else:
        grad = np.array([0.0, 0.0, 2 * s3])
    return RegularizerResult(float(loss), grad_scales=grad)


def rotation_regularizer(R: np.ndarray, frame: LocalFrame, curv: CurvatureInfo) -> RegularizerResult:
    """``sum_c (1 - <r_c, ref_c>)^2`` with references ``(w2, w1, n)``.

    Each reference is first flipped so its inner product with the matched
    column is nonnegative. The gradient holds ``d loss / d R[:, c]`` in
    column ``c``; it is exact away from the sign switch at ``<r_c, ref_c> = 0``.
    """
    R = np.asarray(R, dtype=float)
    refs = np.column_stack([curv.w2, curv.w1, frame.n]).astype(float)
    dots = np.sum(R * refs, axis=0)
    sign = np.where(dots < 0, -1.0, 1.0)
    refs = refs * sign
    dots = dots * sign
    res = 1 - dots
    grad = -2 * res * refs
    return RegularizerResult(float(np.sum(res**2)), grad_rotation=grad)
