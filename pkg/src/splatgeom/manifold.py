"""Tangent frames and principal curvatures from nested Leibniz defects.

The metric at a point is half the Leibniz defect of the coordinate
functions, which gives the tangential kernel matrix. Its two leading
eigenvectors span the tangent plane and the trailing one is the normal.
The shape operator is built from Leibniz defects nested two deep, with
the inner defect evaluated at every neighbor from that neighbor's own
kernel weights.

The per-point functions mirror the math one call at a time. The batch
driver :func:`estimate_all` computes the same quantities with array
contractions; the two routes are checked against each other in the tests.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .laplacian import (
    KernelWeights,
    LocalFunction,
    adaptive_bandwidth,
    auto_bandwidth,
    boost_covariances,
    gaussian_weights,
    leibniz_defect,
)
from .spatial import SpatialIndex, build_index
from .types import EstimateResult, EstimatorConfig, FrameSet, LocalFrame, CurvatureInfo, PointCloud

MIN_NEIGHBORS = 4
_CHUNK = 1 << 15


class DegenerateNeighborhoodError(ValueError):
    pass


@dataclass(frozen=True)
class TangentialKernelMatrix:
    """Symmetric 3x3 kernel matrix with eigenpairs sorted descending."""

    m: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # columns

    @classmethod
    def from_matrix(cls, m) -> "TangentialKernelMatrix":
        m = np.asarray(m, dtype=float)
        m = (m + m.T) / 2
        lam, vec = np.linalg.eigh(m)
        return cls(m, lam[::-1].copy(), vec[:, ::-1].copy())


@dataclass(frozen=True)
class ShapeOperatorMatrix:
    s_full: np.ndarray
    s_tangent: np.ndarray


def _coordinate_functions(positions: np.ndarray, w: KernelWeights) -> list[LocalFunction]:
    diff = positions[w.neighbor_ids] - positions[w.center_id]
    return [LocalFunction(0.0, diff[:, d]) for d in range(3)]


def tangential_kernel_matrix(positions: np.ndarray, w: KernelWeights, t: float) -> TangentialKernelMatrix:
    """``K[d1, d2] = 1/2 Lbnz[phi_d1, phi_d2]`` at ``w.center_id``.

    ``phi_d`` is coordinate ``d`` relative to the center point.
    """
    if len(w.neighbor_ids) < MIN_NEIGHBORS:
        raise DegenerateNeighborhoodError(
            f"point {w.center_id} has {len(w.neighbor_ids)} neighbors, need {MIN_NEIGHBORS}")
    phi = _coordinate_functions(np.asarray(positions, dtype=float), w)
    m = np.array([[0.5 * leibniz_defect(phi[a], phi[b], w, t) for b in range(3)] for a in range(3)])
    return TangentialKernelMatrix.from_matrix(m)


def calibration_scale(km: TangentialKernelMatrix) -> float:
    """Mean of the two tangent eigenvalues, which should both be 1."""
    l1, l2 = km.eigenvalues[0], km.eigenvalues[1]
    if not l1 > 0:
        raise DegenerateNeighborhoodError("leading kernel eigenvalue is not positive")
    return float((l1 + l2) / 2)


def local_frame_from_kernel(km: TangentialKernelMatrix, c: float,
                            dim_threshold: float = 0.5) -> tuple[LocalFrame, int]:
    """Frame from the kernel eigenvectors plus the estimated dimension.

    The dimension counts calibrated eigenvalues above ``dim_threshold``.
    The normal is rebuilt as ``u1 x u2`` so the frame is right-handed.
    """
    if not c > 0:
        raise ValueError("calibration scale must be positive")
    dim = int(np.sum(km.eigenvalues / c > dim_threshold))
    frame = _orthonormal_frame(km.eigenvectors[:, 0], km.eigenvectors[:, 1])
    return frame, dim


def _orthonormal_frame(a, b) -> LocalFrame:
    u1 = a / np.linalg.norm(a)
    u2 = b - np.dot(b, u1) * u1
    u2 = u2 / np.linalg.norm(u2)
    return LocalFrame(u1, u2, np.cross(u1, u2))


def shape_operator_from_height(positions: np.ndarray, i: int, height: np.ndarray,
                               kernels: Mapping[int, KernelWeights], t: float) -> np.ndarray:
    """Ambient 3x3 matrix ``s[d1, d2]`` for the linear height ``eta(x) = <height, x - q_i>``.

    ``s[d1, d2] = (A[phi_d1, eta, phi_d2] + A[phi_d2, eta, phi_d1] - A[eta, phi_d1, phi_d2]) / 8``
    with ``A[f1, f2, f3] = Lbnz[f1, Lbnz[f2, f3]]``. The inner defect is a
    function over the neighborhood, evaluated at each point from that
    point's own weights, so ``kernels`` must hold ``i`` and its neighbors.
    The result is linear in ``height``.
    """
    positions = np.asarray(positions, dtype=float)
    if i not in kernels:
        raise KeyError(f"missing kernel weights for point {i}")
    wi = kernels[i]
    missing = [int(j) for j in wi.neighbor_ids if int(j) not in kernels]
    if missing:
        raise KeyError(f"missing kernel weights for neighbors {missing[:5]}")
    height = np.asarray(height, dtype=float)
    origin = positions[i]
    support = np.r_[i, wi.neighbor_ids]

    def global_fn(p, vec):
        # linear function x -> <vec, x - origin> at p and at p's neighbors
        w = kernels[int(p)]
        return LocalFunction(float(np.dot(vec, positions[p] - origin)),
                             (positions[w.neighbor_ids] - origin) @ vec)

    def inner(vec_a, vec_b) -> LocalFunction:
        vals = np.array([leibniz_defect(global_fn(p, vec_a), global_fn(p, vec_b), kernels[int(p)], t)
                         for p in support])
        return LocalFunction(vals[0], vals[1:])

    basis = np.eye(3)
    eta_i = global_fn(i, height)
    phi_i = [global_fn(i, basis[d]) for d in range(3)]
    inner_eta_phi = [inner(height, basis[d]) for d in range(3)]
    s = np.zeros((3, 3))
    for d1 in range(3):
        for d2 in range(3):
            a1 = leibniz_defect(phi_i[d1], inner_eta_phi[d2], wi, t)
            a2 = leibniz_defect(phi_i[d2], inner_eta_phi[d1], wi, t)
            a3 = leibniz_defect(eta_i, inner(basis[d1], basis[d2]), wi, t)
            s[d1, d2] = (a1 + a2 - a3) / 8
    return (s + s.T) / 2


def shape_operator_full(positions: np.ndarray, i: int, frame: LocalFrame,
                        kernels: Mapping[int, KernelWeights], t: float) -> ShapeOperatorMatrix:
    """Shape operator ``s(n, ., .)`` at point ``i``, ambient and tangent-projected.

    Uses the height over the tangent plane, ``eta(x) = <n, x - q_i>``; see
    :func:`shape_operator_from_height`. Uncalibrated.
    """
    s = shape_operator_from_height(positions, i, frame.n, kernels, t)
    V = frame.tangent_basis
    st = V.T @ s @ V
    return ShapeOperatorMatrix(s, (st + st.T) / 2)


def principal_curvatures(so: ShapeOperatorMatrix, frame: LocalFrame, c: float) -> CurvatureInfo:
    """Eigenpairs of ``s_tangent / c^2`` mapped back to ambient directions."""
    lam, w = np.linalg.eigh(so.s_tangent / c**2)
    V = frame.tangent_basis
    dirs = (V @ w).T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return CurvatureInfo(lam[0], lam[1], dirs[0], dirs[1])


# ---------------------------------------------------------------- batch path

def _chunked(n: int, fn, threads: int):
    bounds = [(s, min(n, s + _CHUNK)) for s in range(0, n, _CHUNK)]
    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(threads) as ex:
            list(ex.map(lambda b: fn(*b), bounds))
    else:
        for b in bounds:
            fn(*b)


def order_by_magnitude(lam: np.ndarray, vec: np.ndarray):
    """Sort 2-eigenpairs per row by descending ``|lam|``; ties keep eigh order."""
    swap = np.abs(lam[:, 1]) > np.abs(lam[:, 0])
    lam = np.where(swap[:, None], lam[:, ::-1], lam)
    vec = np.where(swap[:, None, None], vec[:, :, ::-1], vec)
    return lam, vec


def batch_weights(positions, dist, idx, t, config: EstimatorConfig, covariances=None):
    """Kernel weights for every row of a k-NN table; returns (weights, flagged)."""
    n = len(positions)
    flagged = np.zeros(n, dtype=bool)
    if not config.adaptive_kernel:
        return gaussian_weights(dist**2, t), flagged
    if covariances is None:
        raise ValueError("adaptive kernel needs per-point covariances")
    cov = boost_covariances(covariances, config.xi_min)
    w = np.empty_like(dist)
    for s in range(0, n, _CHUNK):
        e = min(n, s + _CHUNK)
        lam = adaptive_bandwidth(cov[s:e, None], cov[idx[s:e]], t, config.xi_min)
        bad = np.linalg.eigvalsh(lam)[..., 0] <= 0
        lam[bad] = np.eye(3)
        diff = positions[idx[s:e]] - positions[s:e, None, :]
        q = np.einsum("nkd,nkd->nk", diff, np.linalg.solve(lam, diff[..., None])[..., 0])
        w[s:e] = gaussian_weights(q, 1.0)
        row_bad = bad.any(axis=1)
        flagged[s:e] |= row_bad
        if row_bad.any():
            w[s:e][row_bad] = gaussian_weights(dist[s:e][row_bad] ** 2, t)
    return w, flagged


def estimate_all(cloud, config: Optional[EstimatorConfig] = None,
                 index: Optional[SpatialIndex] = None) -> EstimateResult:
    """Frames and principal curvatures for every point of ``cloud``.

    Pass 1 computes kernel matrices, calibration scales and frames. Pass 2
    computes shape operators from the pass-1 kernel matrices of each
    neighbor. Points with fewer than four distinct neighbors, or whose
    neighbors all coincide with them, are flagged and get the identity
    frame with zero curvature.
    """
    config = config or EstimatorConfig()
    if not isinstance(cloud, PointCloud):
        cloud = PointCloud(cloud)
    P = cloud.positions
    N = len(P)
    if N == 0:
        raise ValueError("empty point cloud")
    timings = {}
    t0 = time.perf_counter()
    index = index or build_index(P, workers=config.threads)
    dist, idx = index.knn_all(config.k_neighbors)
    timings["index"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    k = idx.shape[1]
    flagged = np.zeros(N, dtype=bool)
    eye = np.eye(3)
    if k < MIN_NEIGHBORS:
        frames = FrameSet(np.tile(eye[0], (N, 1)), np.tile(eye[1], (N, 1)), np.tile(eye[2], (N, 1)))
        zeros = np.zeros((N, 2))
        return EstimateResult(
            "manifold", frames, zeros, frames.u1, frames.u2, np.ones(N, dtype=bool),
            diagnostics={"eigenvalues": np.zeros((N, 3)), "calibration": np.zeros(N),
                         "dimension": np.zeros(N, dtype=np.int64)},
            timings={**timings, "pass1": 0.0, "pass2": 0.0},
            params={"k_neighbors": int(config.k_neighbors), "bandwidth_t": None})
    kth = dist[:, -1]
    if config.bandwidth_t == "auto":
        t = auto_bandwidth(kth, seed=config.seed)
    else:
        t = float(config.bandwidth_t)
    w, wflag = batch_weights(P, dist, idx, t, config, cloud.covariances)
    flagged |= wflag
    flagged |= dist[:, -1] == 0

    C = np.empty((N, 3, 3))
    lam = np.empty((N, 3))
    vec = np.empty((N, 3, 3))

    def pass1(s, e):
        D = P[idx[s:e]] - P[s:e, None, :]
        C[s:e] = np.einsum("nk,nka,nkb->nab", w[s:e] / t, D, D)
        l, v = np.linalg.eigh(C[s:e] / 2)
        lam[s:e] = l[:, ::-1]
        vec[s:e] = v[:, :, ::-1]

    _chunked(N, pass1, config.threads)
    c = (lam[:, 0] + lam[:, 1]) / 2
    flagged |= ~(lam[:, 0] > 0) | ~np.isfinite(c)
    c_safe = np.where(flagged, 1.0, c)
    calibrated = lam / c_safe[:, None]
    dimension = np.sum(calibrated > config.dim_threshold, axis=1)
    u1 = vec[:, :, 0]
    u2 = vec[:, :, 1] - np.einsum("nd,nd->n", vec[:, :, 1], u1)[:, None] * u1
    u2 /= np.linalg.norm(u2, axis=1, keepdims=True)
    nrm = np.cross(u1, u2)
    timings["pass1"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    tau = np.zeros((N, 2))
    W1 = np.empty((N, 3))
    W2 = np.empty((N, 3))

    def pass2(s, e):
        D = P[idx[s:e]] - P[s:e, None, :]
        wt = w[s:e] / t
        dC = C[idx[s:e]] - C[s:e, None]
        n = nrm[s:e]
        dCn = np.einsum("nkbc,nb->nkc", dC, n)
        A1 = np.einsum("nk,nka,nkc->nac", wt, D, dCn)
        eta = np.einsum("nka,na->nk", D, n)
        A3 = np.einsum("nk,nkbc->nbc", wt * eta, dC)
        S = (A1 + A1.transpose(0, 2, 1) - A3) / 8
        S = (S + S.transpose(0, 2, 1)) / 2
        V = np.stack([u1[s:e], u2[s:e]], axis=2)
        St = np.einsum("nai,nab,nbj->nij", V, S, V)
        St = (St + St.transpose(0, 2, 1)) / 2
        l, v = np.linalg.eigh(St / (c_safe[s:e] ** 2)[:, None, None])
        l, v = order_by_magnitude(l, v)
        dirs = np.einsum("nai,nid->nda", V, v)
        dirs /= np.linalg.norm(dirs, axis=2, keepdims=True)
        tau[s:e] = l
        W1[s:e] = dirs[:, 0]
        W2[s:e] = dirs[:, 1]

    _chunked(N, pass2, config.threads)
    timings["pass2"] = time.perf_counter() - t0

    if flagged.any():
        u1[flagged], u2[flagged], nrm[flagged] = eye[0], eye[1], eye[2]
        tau[flagged] = 0.0
        W1[flagged], W2[flagged] = eye[0], eye[1]
    return EstimateResult(
        "manifold", FrameSet(u1, u2, nrm), tau, W1, W2, flagged,
        diagnostics={"eigenvalues": calibrated, "calibration": c,
                     "dimension": dimension.astype(np.int64),
                     "eigengap": calibrated[:, 1] - calibrated[:, 2]},
        timings=timings,
        params={"k_neighbors": int(config.k_neighbors), "bandwidth_t": float(t)})
