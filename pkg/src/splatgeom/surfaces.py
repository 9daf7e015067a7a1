"""Analytic surfaces with exact frames and curvatures, samplers and a PCA baseline.

Curvatures are signed relative to the analytic normal: a surface that
bends towards its normal, like ``z = k x^2 / 2`` with normal ``+z``, has
positive curvature. Outward normals on the sphere, cylinder and torus
therefore give negative curvatures.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .spatial import SpatialIndex
from .types import CurvatureInfo, FrameSet, LocalFrame, PointCloud

KINDS = ("plane", "sphere", "cylinder", "torus", "helicoid")
_DEFAULTS = {
    "plane": {"half_size": 1.0},
    "sphere": {"radius": 1.0},
    "cylinder": {"radius": 0.5, "height": 2.0},
    "torus": {"major": 2.0, "minor": 0.5},
    "helicoid": {"pitch": 2.0, "half_width": 1.0},
}
_ON_SURFACE_TOL = 1e-9


class OffSurfaceError(ValueError):
    pass


@dataclass(frozen=True)
class AnalyticSurface:
    """A parametric surface in canonical position moved by a rigid pose.

    Canonical placements: plane ``z = 0`` over ``[-a, a]^2``; sphere and
    torus centered at the origin (torus axis ``z``); cylinder along ``z``
    with ``|z| <= height / 2``; helicoid ``(v cos u, v sin u, c u)`` with
    ``u`` in one period ``[0, 2 pi)`` and ``|v| <= half_width``.
    """

    kind: str
    params: dict = field(default_factory=dict)
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown surface kind {self.kind!r}")
        merged = {**_DEFAULTS[self.kind], **self.params}
        unknown = set(merged) - set(_DEFAULTS[self.kind])
        if unknown:
            raise ValueError(f"unknown parameters for {self.kind}: {sorted(unknown)}")
        if any(not v > 0 for v in merged.values()):
            raise ValueError("surface dimensions must be positive")
        object.__setattr__(self, "params", merged)
        R = np.array(self.rotation, dtype=float)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or np.linalg.det(R) < 0:
            raise ValueError("pose rotation must be a proper rotation")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", np.array(self.translation, dtype=float))

    @property
    def area(self) -> float:
        p = self.params
        if self.kind == "plane":
            return (2 * p["half_size"]) ** 2
        if self.kind == "sphere":
            return 4 * np.pi * p["radius"] ** 2
        if self.kind == "cylinder":
            return 2 * np.pi * p["radius"] * p["height"]
        if self.kind == "torus":
            return 4 * np.pi**2 * p["major"] * p["minor"]
        c, V = p["pitch"], p["half_width"]
        prim = V * np.sqrt(c * c + V * V) / 2 + c * c / 2 * np.arcsinh(V / c)
        return 2 * np.pi * 2 * prim

    def to_world(self, x):
        return np.asarray(x) @ self.rotation.T + self.translation

    def to_local(self, x):
        return (np.asarray(x) - self.translation) @ self.rotation

    def direction_to_world(self, v):
        return np.asarray(v) @ self.rotation.T


def parse_surface(spec: str) -> AnalyticSurface:
    """Parse ``kind[:a[,b]]``, e.g. ``sphere:1.0`` or ``torus:2,0.5``."""
    kind, _, rest = spec.partition(":")
    kind = kind.strip()
    if kind not in KINDS:
        raise ValueError(f"unknown surface {kind!r}; choose from {', '.join(KINDS)}")
    names = list(_DEFAULTS[kind])
    vals = [float(v) for v in rest.split(",") if v.strip()] if rest else []
    if len(vals) > len(names):
        raise ValueError(f"{kind} takes at most {len(names)} parameters")
    return AnalyticSurface(kind, dict(zip(names, vals)))


# --------------------------------------------------------------- ground truth

def _local_truth(surface: AnalyticSurface, x: np.ndarray):
    """Vectorized local-frame truth: (normal, tau1, tau2, w1, w2, residual, boundary)."""
    p = surface.params
    m = len(x)
    ex, ey, ez = np.eye(3)
    if surface.kind == "plane":
        a = p["half_size"]
        normal = np.tile(ez, (m, 1))
        w1, w2 = np.tile(ex, (m, 1)), np.tile(ey, (m, 1))
        t1 = t2 = np.zeros(m)
        resid = np.abs(x[:, 2])
        bd = np.minimum(a - np.abs(x[:, 0]), a - np.abs(x[:, 1]))
    elif surface.kind == "sphere":
        R = p["radius"]
        rad = np.linalg.norm(x, axis=1)
        normal = x / rad[:, None]
        w1 = np.cross(normal, np.where(np.abs(normal[:, 2:3]) < 0.9, ez, ex))
        w1 /= np.linalg.norm(w1, axis=1, keepdims=True)
        w2 = np.cross(normal, w1)
        t1 = t2 = np.full(m, -1.0 / R)
        resid = np.abs(rad - R)
        bd = np.full(m, np.inf)
    elif surface.kind == "cylinder":
        r, h = p["radius"], p["height"]
        rho = np.hypot(x[:, 0], x[:, 1])
        normal = np.c_[x[:, 0] / rho, x[:, 1] / rho, np.zeros(m)]
        w1 = np.c_[-normal[:, 1], normal[:, 0], np.zeros(m)]
        w2 = np.tile(ez, (m, 1))
        t1, t2 = np.full(m, -1.0 / r), np.zeros(m)
        resid = np.maximum(np.abs(rho - r), np.maximum(np.abs(x[:, 2]) - h / 2, 0))
        bd = h / 2 - np.abs(x[:, 2])
    elif surface.kind == "torus":
        R, r = p["major"], p["minor"]
        theta = np.arctan2(x[:, 1], x[:, 0])
        rho = np.hypot(x[:, 0], x[:, 1])
        phi = np.arctan2(x[:, 2], rho - R)
        ct, st, cp, sp = np.cos(theta), np.sin(theta), np.cos(phi), np.sin(phi)
        normal = np.c_[cp * ct, cp * st, sp]
        w1 = np.c_[-sp * ct, -sp * st, cp]          # meridian
        w2 = np.c_[-st, ct, np.zeros(m)]            # parallel
        t1 = np.full(m, -1.0 / r)
        t2 = -cp / (R + r * cp)
        resid = np.abs(np.hypot(rho - R, x[:, 2]) - r)
        bd = np.full(m, np.inf)
    else:  # helicoid
        c, V = p["pitch"], p["half_width"]
        u = x[:, 2] / c
        cu, su = np.cos(u), np.sin(u)
        v = x[:, 0] * cu + x[:, 1] * su
        W = np.sqrt(c * c + v * v)
        normal = np.c_[-c * su, c * cu, -v] / W[:, None]
        eu = np.c_[-v * su, v * cu, np.full(m, c)] / W[:, None]
        ev = np.c_[cu, su, np.zeros(m)]
        k = c / (c * c + v * v)
        t1, t2 = k, -k
        w1 = (eu + ev) / np.sqrt(2)
        w2 = (eu - ev) / np.sqrt(2)
        resid = np.hypot(x[:, 0] - v * cu, x[:, 1] - v * su)
        bd = np.minimum(V - np.abs(v), c * np.minimum(u, 2 * np.pi - u))
    return normal, np.asarray(t1, float), np.asarray(t2, float), w1, w2, resid, bd


def analytic_curvature(surface: AnalyticSurface, point) -> tuple[LocalFrame, CurvatureInfo]:
    """Exact frame and principal curvatures at a point on the surface.

    The returned frame has ``u1, u2`` along the principal directions; the
    curvature info carries the signed values relative to ``frame.n``.
    """
    x = surface.to_local(np.asarray(point, dtype=float).reshape(1, 3))
    normal, t1, t2, w1, w2, resid, _ = _local_truth(surface, x)
    if resid[0] > _ON_SURFACE_TOL * max(1.0, np.abs(x).max()):
        raise OffSurfaceError(f"point is {resid[0]:.3g} away from the {surface.kind}")
    n, a, b = (surface.direction_to_world(v[0]) for v in (normal, w1, w2))
    frame = LocalFrame(a, b, n)
    return frame, CurvatureInfo(t1[0], t2[0], a, b)


# ------------------------------------------------------------------- sampling

def _iid_local(surface: AnalyticSurface, n: int, rng: np.random.Generator) -> np.ndarray:
    p = surface.params
    if surface.kind == "plane":
        a = p["half_size"]
        return np.c_[rng.uniform(-a, a, (n, 2)), np.zeros(n)]
    if surface.kind == "sphere":
        g = rng.standard_normal((n, 3))
        return p["radius"] * g / np.linalg.norm(g, axis=1, keepdims=True)
    if surface.kind == "cylinder":
        th = rng.uniform(0, 2 * np.pi, n)
        z = rng.uniform(-p["height"] / 2, p["height"] / 2, n)
        return np.c_[p["radius"] * np.cos(th), p["radius"] * np.sin(th), z]
    out = []
    got = 0
    while got < n:
        m = 2 * (n - got) + 16
        if surface.kind == "torus":
            R, r = p["major"], p["minor"]
            th, ph = rng.uniform(0, 2 * np.pi, (2, m))
            keep = rng.uniform(0, R + r, m) < R + r * np.cos(ph)
            th, ph = th[keep], ph[keep]
            pts = np.c_[(R + r * np.cos(ph)) * np.cos(th), (R + r * np.cos(ph)) * np.sin(th), r * np.sin(ph)]
        else:
            c, V = p["pitch"], p["half_width"]
            u = rng.uniform(0, 2 * np.pi, m)
            v = rng.uniform(-V, V, m)
            keep = rng.uniform(0, np.sqrt(c * c + V * V), m) < np.sqrt(c * c + v * v)
            u, v = u[keep], v[keep]
            pts = np.c_[v * np.cos(u), v * np.sin(u), c * u]
        out.append(pts)
        got += len(pts)
    return np.concatenate(out)[:n]


def sample_elimination(points: np.ndarray, n: int, area: float) -> np.ndarray:
    """Thin ``points`` to ``n`` well-spaced samples; returns kept indices (sorted).

    Greedy weighted sample elimination: each point is weighted by
    ``sum (1 - d / (2 r_max))^8`` over neighbors within ``2 r_max``, with
    ``r_max`` the hexagonal-packing radius of ``n`` points on ``area``. The
    heaviest point is removed and its neighbors' weights updated until
    ``n`` remain. Ties go to the lower index.
    """
    m = len(points)
    if n >= m:
        return np.arange(m)
    rmax = np.sqrt(area / (2 * np.sqrt(3) * n))
    pairs = cKDTree(points).query_pairs(2 * rmax, output_type="ndarray")
    d = np.linalg.norm(points[pairs[:, 0]] - points[pairs[:, 1]], axis=1)
    wv = (1 - d / (2 * rmax)) ** 8
    src = np.concatenate([pairs[:, 0], pairs[:, 1]])
    dst = np.concatenate([pairs[:, 1], pairs[:, 0]])
    ww = np.concatenate([wv, wv])
    order = np.lexsort((dst, src))
    src, dst, ww = src[order], dst[order], ww[order]
    start = np.searchsorted(src, np.arange(m + 1))
    W = np.bincount(src, ww, minlength=m).tolist()
    alive = [True] * m
    heap = [(-W[i], i) for i in range(m)]
    heapq.heapify(heap)
    dst_l, ww_l, start_l = dst.tolist(), ww.tolist(), start.tolist()
    left = m
    while left > n:
        negw, i = heapq.heappop(heap)
        if not alive[i] or -negw != W[i]:
            continue
        alive[i] = False
        left -= 1
        for a in range(start_l[i], start_l[i + 1]):
            j = dst_l[a]
            if alive[j]:
                W[j] -= ww_l[a]
                heapq.heappush(heap, (-W[j], j))
    return np.flatnonzero(alive)


def sample_surface(surface: AnalyticSurface, n: int, seed: int = 0, noise_sigma: float = 0.0,
                   scheme: str = "blue", oversample: int = 5) -> PointCloud:
    """Area-uniform samples with exact per-point ground truth.

    ``scheme="iid"`` draws independent area-uniform points. ``scheme="blue"``
    (default) draws ``oversample * n`` such points and thins them with
    :func:`sample_elimination`, which keeps the density uniform but removes
    clumps; kernel sums over a neighborhood then carry far less sampling
    noise. Gaussian noise of std ``noise_sigma`` is added after the truth
    is recorded. Output is deterministic per seed.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if scheme not in ("blue", "iid"):
        raise ValueError("scheme must be 'blue' or 'iid'")
    rng = np.random.default_rng(seed)
    if scheme == "iid":
        x = _iid_local(surface, n, rng)
    else:
        cand = _iid_local(surface, oversample * n, rng)
        x = cand[sample_elimination(cand, n, surface.area)]
    normal, t1, t2, w1, w2, _, bd = _local_truth(surface, x)
    truth = {
        "normal": surface.direction_to_world(normal),
        "tau": np.c_[t1, t2],
        "w1": surface.direction_to_world(w1),
        "w2": surface.direction_to_world(w2),
        "boundary_distance": bd,
    }
    pos = surface.to_world(x)
    if noise_sigma > 0:
        pos = pos + rng.normal(scale=noise_sigma, size=pos.shape)
    return PointCloud(pos, truth=truth)


def interior_mask(cloud: PointCloud, k: int = 10) -> np.ndarray:
    """Points farther than 2x the mean k-NN distance from the patch boundary."""
    if cloud.truth is None:
        return np.ones(len(cloud), dtype=bool)
    bd = cloud.truth["boundary_distance"]
    if np.all(np.isinf(bd)) or len(cloud) < 2:
        return np.ones(len(cloud), dtype=bool)
    d, _ = cKDTree(cloud.positions).query(cloud.positions, min(k, len(cloud) - 1) + 1)
    margin = 2 * d[:, 1:].mean()
    return bd > margin


# ---------------------------------------------------------------- PCA baseline

class RankDeficientError(ValueError):
    pass


def pca_baseline_frame(index: SpatialIndex, i: int, k: int) -> LocalFrame:
    """Local PCA frame: covariance of the point and its ``k`` neighbors, centered."""
    if k < 3:
        raise ValueError("k must be >= 3")
    nb = index.knn(i, k)
    pts = index.positions[np.r_[i, nb.indices]]
    cov = np.cov(pts.T, bias=True)
    lam, vec = np.linalg.eigh(cov)
    if len(nb) < 2 or lam[1] <= 1e-14 * max(lam[2], 1e-300):
        raise RankDeficientError(f"neighborhood of point {i} does not span a plane")
    u1, u2 = vec[:, 2], vec[:, 1]
    return LocalFrame(u1, u2, np.cross(u1, u2))


def pca_frames(positions: np.ndarray, k: int, index: SpatialIndex | None = None):
    """Batch PCA frames; returns ``(FrameSet, flagged)``."""
    positions = np.asarray(positions, dtype=float)
    index = index or SpatialIndex(positions)
    _, idx = index.knn_all(k)
    N = len(positions)
    pts = np.concatenate([positions[:, None, :], positions[idx]], axis=1)
    centered = pts - pts.mean(axis=1, keepdims=True)
    cov = np.einsum("nka,nkb->nab", centered, centered) / pts.shape[1]
    lam, vec = np.linalg.eigh(cov)
    flagged = ~(lam[:, 1] > 1e-14 * np.maximum(lam[:, 2], 1e-300))
    u1, u2 = vec[:, :, 2], vec[:, :, 1]
    nrm = np.cross(u1, u2)
    eye = np.eye(3)
    if flagged.any():
        u1[flagged], u2[flagged], nrm[flagged] = eye[0], eye[1], eye[2]
    return FrameSet(u1, u2, nrm), flagged
