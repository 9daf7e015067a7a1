"""Accuracy and throughput campaigns over synthetic surfaces."""
from __future__ import annotations

import json
import os
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .pipeline import METHODS, accuracy_aggregates, run_estimator
from .surfaces import parse_surface, sample_surface
from .types import EstimatorConfig

THROUGHPUT_LIMIT_S = 60.0
# Above this size the blue-noise sampler's elimination pass dominates, so
# large cells fall back to i.i.d. sampling unless told otherwise.
BLUE_NOISE_MAX_N = 200_000


@dataclass(frozen=True)
class CampaignCell:
    surface: str
    n: int
    sigma: float = 0.0
    method: str = "manifold"
    config: dict = field(default_factory=dict)
    scheme: Optional[str] = None

    def estimator_config(self) -> EstimatorConfig:
        return EstimatorConfig(**self.config)

    def label(self) -> str:
        return f"{self.surface}/n={self.n}/sigma={self.sigma}/{self.method}"


@dataclass(frozen=True)
class CampaignSpec:
    cells: tuple
    repetitions: int = 1
    seed_base: int = 0

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(
            c if isinstance(c, CampaignCell) else CampaignCell(**c) for c in self.cells))
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        for c in self.cells:
            if c.method not in METHODS:
                raise ValueError(f"{c.label()}: unknown method")
            k = c.estimator_config().k_neighbors
            if c.n < k + 1:
                raise ValueError(f"{c.label()}: n must be at least k_neighbors + 1 = {k + 1}")

    @classmethod
    def from_file(cls, path) -> "CampaignSpec":
        data = json.loads(Path(path).read_text())
        return cls(cells=tuple(data["cells"]), repetitions=data.get("repetitions", 1),
                   seed_base=data.get("seed_base", 0))


def run_cell(cell: CampaignCell, seed: int):
    """Sample, estimate and score one cell; returns (aggregates, timings)."""
    surface = parse_surface(cell.surface)
    scheme = cell.scheme or ("blue" if cell.n <= BLUE_NOISE_MAX_N else "iid")
    t0 = time.perf_counter()
    cloud = sample_surface(surface, cell.n, seed=seed, noise_sigma=cell.sigma, scheme=scheme)
    t_sample = time.perf_counter() - t0
    res = run_estimator(cloud, cell.method, cell.estimator_config())
    timings = {k: float(v) for k, v in res.timings.items()}
    timings["total"] = sum(timings.values())
    timings["sampling"] = t_sample
    return accuracy_aggregates(res, cloud), timings


def run_campaign(spec: CampaignSpec) -> dict:
    """Run every cell ``spec.repetitions`` times with the same seed.

    Accuracy numbers come from the first repetition and are checked to be
    identical across repetitions; timings are medians. A failing cell is
    recorded with its error and the campaign continues.
    """
    rows = []
    for k, cell in enumerate(spec.cells):
        seed = spec.seed_base + k
        row = {"surface": cell.surface, "n": cell.n, "sigma": cell.sigma, "method": cell.method,
               "seed": seed, "scheme": cell.scheme or ("blue" if cell.n <= BLUE_NOISE_MAX_N else "iid")}
        try:
            aggs, times = [], []
            for _ in range(spec.repetitions):
                a, t = run_cell(cell, seed)
                aggs.append(a)
                times.append(t)
            row["status"] = "ok"
            row["aggregates"] = aggs[0]
            row["deterministic"] = all(a == aggs[0] for a in aggs)
            row["timings"] = {name: float(np.median([t[name] for t in times])) for name in times[0]}
        except Exception as exc:  # recorded, campaign continues
            row["status"] = "error"
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return {"schema_version": 1, "repetitions": spec.repetitions, "seed_base": spec.seed_base,
            "rows": rows}


def noise_sweep(surface: str, n: int, sigmas, seed: int = 0, k: int = 30,
                methods=("manifold", "varifold", "pca")) -> tuple[list[dict], list[str]]:
    """Error table over noise levels plus warnings where an estimator loses to PCA.

    The comparison is a soft check: violations are returned as warnings.
    """
    cells = [CampaignCell(surface, n, float(s), m, {"k_neighbors": k}) for s in sigmas for m in methods]
    rows = []
    for cell in cells:
        a, t = run_cell(cell, seed)
        rows.append({"sigma": cell.sigma, "method": cell.method, **a, "time_s": t["total"]})
    msgs = []
    for s in sigmas:
        if s <= 0:
            continue
        pca = next((r for r in rows if r["sigma"] == s and r["method"] == "pca"), None)
        if pca is None:
            continue
        for r in rows:
            if r["sigma"] == s and r["method"] != "pca" and \
                    r["median_normal_error_deg"] > pca["median_normal_error_deg"]:
                msgs.append(f"sigma={s}: {r['method']} normal error {r['median_normal_error_deg']:.3f} deg "
                            f"exceeds PCA {pca['median_normal_error_deg']:.3f} deg")
    for m in msgs:
        warnings.warn(m, stacklevel=2)
    return rows, msgs


def throughput(n: int = 1_000_000, k: int = 16, seed: int = 0, threads: Optional[int] = None) -> dict:
    """Time full manifold estimation on an ``n``-point unit sphere.

    Returns stage timings, the total and whether it met the 60 s gate.
    The gate is soft: a miss warns rather than raises, since it depends on
    the host (it is specified for an 8-core desktop).
    """
    threads = threads or os.cpu_count() or 1
    cloud = sample_surface(parse_surface("sphere:1.0"), n, seed=seed, scheme="iid")
    res = run_estimator(cloud, "manifold", EstimatorConfig(k_neighbors=k, threads=threads))
    timings = {key: float(v) for key, v in res.timings.items()}
    total = sum(timings.values())
    ok = total < THROUGHPUT_LIMIT_S
    if not ok:
        warnings.warn(f"throughput: {total:.1f} s for {n} points exceeds {THROUGHPUT_LIMIT_S} s "
                      f"on {os.cpu_count()} cores", stacklevel=2)
    return {"n": n, "k": k, "threads": threads, "cpu_count": os.cpu_count(), "timings": timings,
            "total": total, "within_limit": ok, "n_flagged": int(res.flagged.sum())}


def scalability_ratio(n: int = 100_000, k: int = 16, seed: int = 0) -> float:
    """Pass-1 wall-clock ratio between ``2n`` and ``n`` points (sphere, manifold)."""
    times = []
    for m in (n, 2 * n):
        cloud = sample_surface(parse_surface("sphere:1.0"), m, seed=seed, scheme="iid")
        best = min(run_estimator(cloud, "manifold", EstimatorConfig(k_neighbors=k)).timings["pass1"]
                   for _ in range(3))
        times.append(best)
    return times[1] / times[0]
