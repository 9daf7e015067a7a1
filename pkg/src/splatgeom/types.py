"""Shared value types for point-set geometry and Gaussian primitives.

All types are frozen dataclasses holding numpy arrays. Constructors copy
and freeze their array inputs so values can be shared between threads.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

ORTHO_TOL = 1e-9
DIRECTION_TOL = 1e-6


def _frozen(a, dtype=float, shape=None) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    if shape is not None and arr.shape != shape:
        raise ValueError(f"expected shape {shape}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class LocalFrame:
    """Orthonormal tangent basis ``u1, u2`` and unit normal ``n`` at a point."""

    u1: np.ndarray
    u2: np.ndarray
    n: np.ndarray

    def __post_init__(self):
        for name in ("u1", "u2", "n"):
            object.__setattr__(self, name, _frozen(getattr(self, name), shape=(3,)))

    @classmethod
    def identity(cls) -> "LocalFrame":
        return cls(np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), np.array([0, 0, 1.0]))

    @property
    def tangent_basis(self) -> np.ndarray:
        """3x2 matrix ``V = [u1 u2]``."""
        return np.column_stack([self.u1, self.u2])

    @property
    def matrix(self) -> np.ndarray:
        """3x3 matrix with columns ``u1, u2, n``."""
        return np.column_stack([self.u1, self.u2, self.n])


@dataclass(frozen=True)
class CurvatureInfo:
    """Principal curvatures with ambient principal directions.

    Construction reorders the inputs so that ``|tau1| >= |tau2|``, swapping
    the directions along with the values.
    """

    tau1: float
    tau2: float
    w1: np.ndarray
    w2: np.ndarray

    def __post_init__(self):
        t1, t2 = float(self.tau1), float(self.tau2)
        w1 = _frozen(self.w1, shape=(3,))
        w2 = _frozen(self.w2, shape=(3,))
        if abs(t2) > abs(t1):
            t1, t2, w1, w2 = t2, t1, w2, w1
        object.__setattr__(self, "tau1", t1)
        object.__setattr__(self, "tau2", t2)
        object.__setattr__(self, "w1", w1)
        object.__setattr__(self, "w2", w2)

    @property
    def mac(self) -> float:
        """Mean absolute curvature ``(|tau1| + |tau2|) / 2``."""
        return (abs(self.tau1) + abs(self.tau2)) / 2

    @property
    def mean_curvature(self) -> float:
        return (self.tau1 + self.tau2) / 2


@dataclass(frozen=True)
class GaussianPrimitive:
    """One splat: position, rotation, scales, opacity and color."""

    position: np.ndarray
    rotation: np.ndarray
    scales: np.ndarray
    opacity: float = 0.1
    color: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))

    def __post_init__(self):
        object.__setattr__(self, "position", _frozen(self.position, shape=(3,)))
        object.__setattr__(self, "rotation", _frozen(self.rotation, shape=(3, 3)))
        object.__setattr__(self, "scales", _frozen(self.scales, shape=(3,)))
        object.__setattr__(self, "color", _frozen(self.color, shape=(3,)))
        object.__setattr__(self, "opacity", float(self.opacity))


@dataclass(frozen=True)
class EstimatorConfig:
    """Parameters shared by the estimators.

    Parameters
    ----------
    k_neighbors : int
        Neighborhood size for the kernel estimators.
    bandwidth_t : float or "auto"
        Gaussian kernel bandwidth (length squared).
    varifold_eps : float or "auto"
        Support radius of the varifold kernels.
    xi_min, xi_max : float
        Curvature clamps. ``xi_max="auto"`` resolves to mean + 3 std of
        the estimated ``|tau|``.
    adaptive_kernel : bool
        Use the covariance-adaptive kernel (needs cloud covariances).
    masses : array or None
        Per-point varifold masses, uniform when None.
    """

    k_neighbors: int = 30
    bandwidth_t: Union[float, str] = "auto"
    varifold_eps: Union[float, str] = "auto"
    xi_min: float = 0.001
    xi_max: Union[float, str] = "auto"
    adaptive_kernel: bool = False
    masses: Optional[np.ndarray] = None
    dim_threshold: float = 0.5
    threads: int = 1
    seed: int = 0

    def __post_init__(self):
        problems = validate(self)
        if problems:
            raise ValueError("; ".join(problems))
        if self.masses is not None:
            object.__setattr__(self, "masses", _frozen(self.masses))


@dataclass(frozen=True)
class PointCloud:
    """Point positions with optional colors, covariances and ground truth.

    ``truth`` is only filled by the synthetic samplers and holds arrays
    ``normal (N,3)``, ``tau (N,2)``, ``w1 (N,3)``, ``boundary_distance (N,)``.
    """

    positions: np.ndarray
    colors: Optional[np.ndarray] = None
    covariances: Optional[np.ndarray] = None
    normals: Optional[np.ndarray] = None
    truth: Optional[dict] = None

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float, copy=True).reshape(-1, 3)
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        n = len(pos)
        for name, tail in (("colors", (3,)), ("covariances", (3, 3)), ("normals", (3,))):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, _frozen(val, shape=(n,) + tail))
        problems = validate(self)
        if problems:
            raise ValueError("; ".join(problems))

    def __len__(self):
        return len(self.positions)


def primitive_covariance(p: GaussianPrimitive) -> np.ndarray:
    """Return ``R diag(s^2) R^T``."""
    R = p.rotation
    cov = (R * p.scales**2) @ R.T
    return (cov + cov.T) / 2


def _frame_problems(u1, u2, n) -> list[str]:
    out = []
    for name, v in (("u1", u1), ("u2", u2), ("n", n)):
        if not np.all(np.isfinite(v)):
            out.append(f"{name} not finite")
        elif abs(np.linalg.norm(v) - 1) > ORTHO_TOL:
            out.append(f"{name} not unit length")
    for (a, va), (b, vb) in ((("u1", u1), ("u2", u2)), (("u1", u1), ("n", n)), (("u2", u2), ("n", n))):
        if abs(np.dot(va, vb)) > ORTHO_TOL:
            out.append(f"{a} and {b} not orthogonal")
    return out


def validate(obj, frame: Optional[LocalFrame] = None) -> list[str]:
    """List the invariants violated by ``obj``; empty when all hold.

    For a :class:`CurvatureInfo`, pass ``frame`` to also check that the
    principal directions are tangent.
    """
    out: list[str] = []
    if isinstance(obj, LocalFrame):
        out += _frame_problems(obj.u1, obj.u2, obj.n)
    elif isinstance(obj, CurvatureInfo):
        if abs(obj.tau2) > abs(obj.tau1):
            out.append("ordering: |tau2| > |tau1|")
        if not (np.isfinite(obj.tau1) and np.isfinite(obj.tau2)):
            out.append("curvature not finite")
        if abs(np.dot(obj.w1, obj.w2)) > DIRECTION_TOL:
            out.append("w1 and w2 not orthogonal")
        for name, w in (("w1", obj.w1), ("w2", obj.w2)):
            if abs(np.linalg.norm(w) - 1) > DIRECTION_TOL:
                out.append(f"{name} not unit length")
            if frame is not None and abs(np.dot(w, frame.n)) > DIRECTION_TOL:
                out.append(f"{name} not tangent to frame")
    elif isinstance(obj, GaussianPrimitive):
        R = obj.rotation
        if not np.allclose(R.T @ R, np.eye(3), atol=ORTHO_TOL, rtol=0):
            out.append("rotation not orthonormal")
        elif abs(np.linalg.det(R) - 1) > ORTHO_TOL:
            out.append("rotation determinant not +1")
        s1, s2, s3 = obj.scales
        if not (s1 >= s2 > 0):
            out.append("scales must satisfy s1 >= s2 > 0")
        if not s3 > 0:
            out.append("s3 must be positive")
        if not 0 <= obj.opacity <= 1:
            out.append("opacity outside [0, 1]")
        if np.any(obj.color < 0) or np.any(obj.color > 1):
            out.append("color outside [0, 1]")
    elif isinstance(obj, EstimatorConfig):
        if int(obj.k_neighbors) != obj.k_neighbors or obj.k_neighbors < 4:
            out.append("k_neighbors must be an integer >= 4")
        if obj.bandwidth_t != "auto" and not float(obj.bandwidth_t) > 0:
            out.append("bandwidth_t must be positive or 'auto'")
        if obj.varifold_eps != "auto" and not float(obj.varifold_eps) > 0:
            out.append("varifold_eps must be positive or 'auto'")
        if not obj.xi_min > 0:
            out.append("xi_min must be positive")
        if obj.xi_max != "auto" and not obj.xi_min < float(obj.xi_max):
            out.append("xi_min must be below xi_max")
        if obj.masses is not None and np.any(np.asarray(obj.masses) <= 0):
            out.append("masses must be positive")
        if obj.threads < 1:
            out.append("threads must be >= 1")
    elif isinstance(obj, PointCloud):
        if not np.all(np.isfinite(obj.positions)):
            out.append("positions not finite")
        cov = obj.covariances
        if cov is not None:
            if not np.allclose(cov, cov.transpose(0, 2, 1), atol=1e-9):
                out.append("covariances not symmetric")
            elif len(cov) and np.linalg.eigvalsh(cov).min() < -1e-9:
                out.append("covariances not PSD")
    else:
        raise TypeError(f"cannot validate {type(obj).__name__}")
    return out


@dataclass(frozen=True)
class FrameSet:
    """Structure-of-arrays frames: ``u1, u2, n`` each of shape (N, 3)."""

    u1: np.ndarray
    u2: np.ndarray
    n: np.ndarray

    def __post_init__(self):
        for name in ("u1", "u2", "n"):
            object.__setattr__(self, name, _frozen(np.reshape(getattr(self, name), (-1, 3))))

    def __len__(self):
        return len(self.n)

    def __getitem__(self, i) -> LocalFrame:
        return LocalFrame(self.u1[i], self.u2[i], self.n[i])

    @classmethod
    def from_frames(cls, frames) -> "FrameSet":
        frames = list(frames)
        if not frames:
            z = np.zeros((0, 3))
            return cls(z, z, z)
        return cls(*(np.array([getattr(f, a) for f in frames]) for a in ("u1", "u2", "n")))


@dataclass(frozen=True)
class EstimateResult:
    """Per-point output of a batch estimator.

    Attributes
    ----------
    frames : FrameSet
    tau : (N, 2) signed curvatures relative to ``frames.n``, ``|tau1| >= |tau2|``.
        NaN when the method does not estimate curvature.
    w1, w2 : (N, 3) principal directions.
    flagged : (N,) bool, True where the point failed and carries a fallback.
    diagnostics : dict of per-point arrays (eigenvalues, dimension, ...).
    timings : dict of wall-clock seconds per stage.
    """

    method: str
    frames: FrameSet
    tau: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    flagged: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "tau", _frozen(np.reshape(self.tau, (-1, 2))))
        object.__setattr__(self, "w1", _frozen(np.reshape(self.w1, (-1, 3))))
        object.__setattr__(self, "w2", _frozen(np.reshape(self.w2, (-1, 3))))
        object.__setattr__(self, "flagged", _frozen(self.flagged, dtype=bool))

    def __len__(self):
        return len(self.flagged)

    @property
    def mac(self) -> np.ndarray:
        return np.abs(self.tau).sum(axis=1) / 2

    def frame(self, i) -> LocalFrame:
        return self.frames[i]

    def curvature(self, i) -> CurvatureInfo:
        return CurvatureInfo(self.tau[i, 0], self.tau[i, 1], self.w1[i], self.w2[i])
