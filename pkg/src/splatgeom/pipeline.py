"""Estimator dispatch and accuracy statistics against analytic ground truth."""
from __future__ import annotations

import time
from typing import Optional

import numpy as np

from .manifold import estimate_all
from .spatial import build_index
from .surfaces import AnalyticSurface, interior_mask, pca_frames
from .types import EstimateResult, EstimatorConfig, PointCloud
from .varifold import estimate_all_varifold

METHODS = ("manifold", "varifold", "pca")


def run_estimator(cloud: PointCloud, method: str, config: Optional[EstimatorConfig] = None,
                  frames_from: str = "manifold") -> EstimateResult:
    """Run one estimator over a cloud.

    The varifold method consumes frames; ``frames_from`` picks their source
    (``manifold`` or ``pca``). The PCA baseline produces frames only, so its
    curvatures are NaN.
    """
    config = config or EstimatorConfig()
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if len(cloud) == 0:
        raise ValueError("empty point cloud")
    if method == "manifold":
        return estimate_all(cloud, config)
    if method == "pca" or frames_from == "pca":
        t0 = time.perf_counter()
        index = build_index(cloud, workers=config.threads)
        t_index = time.perf_counter() - t0
        t0 = time.perf_counter()
        frames, flagged = pca_frames(cloud.positions, config.k_neighbors, index)
        t_frames = time.perf_counter() - t0
        if method == "pca":
            nan = np.full((len(cloud), 2), np.nan)
            return EstimateResult("pca", frames, nan, frames.u1, frames.u2, flagged,
                                  timings={"index": t_index, "pass1": t_frames},
                                  params={"k_neighbors": int(config.k_neighbors)})
        res = estimate_all_varifold(cloud, frames, config, index=index)
        timings = {"index": t_index + res.timings["index"], "pass1": t_frames, "pass2": res.timings["pass2"]}
        return _replace(res, flagged=res.flagged | flagged, timings=timings,
                        params={**res.params, "frames_from": "pca"})
    if frames_from != "manifold":
        raise ValueError(f"unknown frame source {frames_from!r}")
    base = estimate_all(cloud, config)
    res = estimate_all_varifold(cloud, base.frames, config)
    timings = {"index": base.timings["index"] + res.timings["index"],
               "pass1": base.timings["pass1"], "pass2": res.timings["pass2"]}
    diag = {**res.diagnostics, **{k: v for k, v in base.diagnostics.items() if k in ("dimension",)}}
    return _replace(res, flagged=res.flagged | base.flagged, timings=timings, diagnostics=diag,
                    params={**base.params, **res.params, "frames_from": "manifold"})


def _replace(res: EstimateResult, **kw) -> EstimateResult:
    fields = dict(method=res.method, frames=res.frames, tau=res.tau, w1=res.w1, w2=res.w2,
                  flagged=res.flagged, diagnostics=res.diagnostics, timings=res.timings,
                  params=res.params)
    fields.update(kw)
    return EstimateResult(**fields)


def angle_deg(a: np.ndarray, b: np.ndarray, unsigned: bool = True) -> np.ndarray:
    """Row-wise angle between direction arrays; ``unsigned`` ignores sign."""
    c = np.einsum("nd,nd->n", a, b) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
    if unsigned:
        c = np.abs(c)
    return np.degrees(np.arccos(np.clip(c, -1.0, 1.0)))


def accuracy_aggregates(result: EstimateResult, cloud: PointCloud) -> dict:
    """Error statistics over interior, unflagged points.

    Curvature errors compare magnitudes ``| |tau_d| - |kappa_d| |``. The
    mean curvature is oriented by the ground-truth normal so its sign is
    comparable across points.
    """
    agg: dict = {"n_points": len(result), "n_flagged": int(result.flagged.sum())}
    if len(result) == 0:
        return agg
    if cloud.truth is None:
        if np.all(np.isfinite(result.tau)):
            agg["median_mac"] = float(np.median(result.mac))
        return agg
    truth = cloud.truth
    mask = interior_mask(cloud) & ~result.flagged
    agg["n_evaluated"] = int(mask.sum())
    if not mask.any():
        return agg
    nerr = angle_deg(result.frames.n[mask], truth["normal"][mask])
    agg["median_normal_error_deg"] = float(np.median(nerr))
    agg["p90_normal_error_deg"] = float(np.percentile(nerr, 90))
    if "dimension" in result.diagnostics:
        agg["fraction_dimension_2"] = float(np.mean(result.diagnostics["dimension"][mask] == 2))
    if not np.all(np.isfinite(result.tau[mask])):
        return agg
    est = np.abs(result.tau[mask])
    true = np.abs(truth["tau"][mask])
    err = np.abs(est - true)
    agg["median_abs_curvature_error"] = float(np.median(err))
    agg["p90_abs_curvature_error"] = float(np.percentile(err, 90))
    agg["median_abs_curvature_error_tau1"] = float(np.median(err[:, 0]))
    agg["median_abs_curvature_error_tau2"] = float(np.median(err[:, 1]))
    agg["median_abs_tau1"] = float(np.median(est[:, 0]))
    agg["median_abs_tau2"] = float(np.median(est[:, 1]))
    scale = np.maximum(true, 1e-12)
    rel = np.abs(est - true) / scale
    if np.all(true > 1e-12):
        agg["median_relative_curvature_error"] = float(np.median(rel))
    orient = np.sign(np.einsum("nd,nd->n", result.frames.n[mask], truth["normal"][mask]))
    agg["median_mean_curvature"] = float(np.median(orient * result.tau[mask].sum(axis=1) / 2))
    agg["median_mac"] = float(np.median(est.sum(axis=1) / 2))
    # principal direction error only where the truth is not umbilic
    gap = true[:, 0] - true[:, 1]
    distinct = gap > 0.1 * np.maximum(true[:, 0], 1e-12)
    if distinct.any():
        derr = angle_deg(result.w1[mask][distinct], truth["w1"][mask][distinct])
        agg["median_direction_error_deg"] = float(np.median(derr))
    return agg


def acceptance_thresholds(surface: AnalyticSurface, method: str) -> dict:
    """Upper bounds on aggregates that a clean benchmark run must meet."""
    th = {"median_normal_error_deg": 5.0}
    if method == "pca":
        return th
    rel = 0.15 if method == "manifold" else 0.2
    p = surface.params
    if surface.kind == "plane":
        th["median_abs_curvature_error"] = 0.05
    elif surface.kind == "sphere":
        th["median_abs_curvature_error"] = rel / p["radius"]
    elif surface.kind == "cylinder":
        th["median_abs_curvature_error_tau1"] = rel / p["radius"]
        th["median_abs_tau2"] = 0.1 / p["radius"]
    elif surface.kind == "torus":
        th["median_abs_curvature_error"] = rel / p["minor"]
    else:
        th["median_abs_curvature_error"] = rel / p["pitch"]
    return th


def check_thresholds(aggregates: dict, thresholds: dict) -> list[str]:
    """Names of violated thresholds (missing aggregates count as violations)."""
    bad = []
    for name, bound in thresholds.items():
        val = aggregates.get(name)
        if val is None or not val < bound:
            bad.append(f"{name}={val} (limit {bound})")
    return bad
