"""Command-line interface: ``estimate``, ``init``, ``upsample``, ``bench``, ``compare``."""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

from .io import _atomic_write, dumps_report, make_report, read_point_cloud, write_point_cloud, write_report
from .pipeline import METHODS, acceptance_thresholds, accuracy_aggregates, check_thresholds, run_estimator
from .spatial import build_index
from .splat import auto_xi_max, neighbor_scales, upsample_flat_regions, warmup_covariance
from .surfaces import parse_surface, sample_surface
from .types import EstimatorConfig, GaussianPrimitive, PointCloud, validate

EXIT_OK, EXIT_THRESHOLD, EXIT_USAGE = 0, 1, 2


class UsageError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Resolved command options; mirrors :class:`EstimatorConfig` plus IO fields."""

    command: str
    estimator: EstimatorConfig
    method: str = "manifold"
    input: Optional[str] = None
    output: Optional[str] = None
    surface: Optional[str] = None
    seed: int = 0
    report_format: str = "json"

    def __post_init__(self):
        if self.method not in METHODS:
            raise UsageError(f"unknown method {self.method!r}")
        if not 0 <= self.seed < 2**64:
            raise UsageError("seed must be a 64-bit unsigned integer")
        if self.report_format not in ("json", "csv"):
            raise UsageError("format must be json or csv")

    def echo(self) -> dict:
        e = self.estimator
        return {"command": self.command, "method": self.method, "input": self.input,
                "surface": self.surface, "seed": self.seed, "k_neighbors": e.k_neighbors,
                "bandwidth_t": e.bandwidth_t, "varifold_eps": e.varifold_eps, "xi_min": e.xi_min,
                "xi_max": e.xi_max, "adaptive_kernel": e.adaptive_kernel}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _auto_or_float(s: str):
    return s if s == "auto" else float(s)


def _float_list(s: str):
    try:
        return [float(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from None


def _add_estimator_args(p, method=True):
    if method:
        p.add_argument("--method", choices=METHODS, default="manifold")
    p.add_argument("--k", type=int, default=30, help="neighbors per point (default 30)")
    p.add_argument("--t", type=_auto_or_float, default="auto", help="kernel bandwidth or 'auto'")
    p.add_argument("--eps", type=_auto_or_float, default="auto", help="varifold support or 'auto'")
    p.add_argument("--xi-min", type=float, default=0.001)
    p.add_argument("--xi-max", type=_auto_or_float, default="auto")
    p.add_argument("--adaptive", action="store_true", help="covariance-adaptive kernel")
    p.add_argument("--frames-from", choices=("manifold", "pca"), default="manifold",
                   help="frame source for the varifold method")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="splatgeom", description=__doc__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    e = sub.add_parser("estimate", help="frames and curvatures for a point cloud")
    e.add_argument("--input", required=True)
    e.add_argument("--output", required=True)
    e.add_argument("--format", choices=("json", "csv"), default=None)
    _add_estimator_args(e)

    i = sub.add_parser("init", help="warm-started Gaussian primitives")
    i.add_argument("--input", required=True)
    i.add_argument("--output", required=True)
    i.add_argument("--nbr-k", type=int, default=3, help="neighbors for the scale s_nbr")
    i.add_argument("--opacity", type=float, default=0.1)
    _add_estimator_args(i)

    u = sub.add_parser("upsample", help="midpoint enrichment of flat regions")
    u.add_argument("--input", required=True)
    u.add_argument("--output", required=True)
    u.add_argument("--up-k", type=int, default=10, help="neighbors per flat point (default 10)")
    _add_estimator_args(u)

    b = sub.add_parser("bench", help="synthetic ground-truth benchmark")
    b.add_argument("--surface", required=True, help="e.g. sphere:1.0, cylinder:0.5, plane, helicoid")
    b.add_argument("--n", type=int, default=5000)
    b.add_argument("--sigma", type=float, default=0.0)
    b.add_argument("--scheme", choices=("blue", "iid"), default="blue")
    b.add_argument("--output", default=None)
    b.add_argument("--format", choices=("json", "csv"), default=None)
    _add_estimator_args(b)

    c = sub.add_parser("compare", help="manifold vs varifold vs PCA error table over noise")
    c.add_argument("--surface", required=True)
    c.add_argument("--n", type=int, default=5000)
    c.add_argument("--sigma-sweep", type=_float_list, default=[0.0, 0.002, 0.005, 0.01])
    c.add_argument("--scheme", choices=("blue", "iid"), default="blue")
    c.add_argument("--output", default=None, help="CSV path (stdout when omitted)")
    _add_estimator_args(c, method=False)
    return p


def _estimator_config(args) -> EstimatorConfig:
    try:
        return EstimatorConfig(k_neighbors=args.k, bandwidth_t=args.t, varifold_eps=args.eps,
                               xi_min=args.xi_min, xi_max=args.xi_max, adaptive_kernel=args.adaptive,
                               threads=max(1, args.threads), seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _format_for(path, explicit):
    if explicit:
        return explicit
    return "csv" if path and str(path).lower().endswith(".csv") else "json"


def _load(path) -> PointCloud:
    if not Path(path).exists():
        raise UsageError(f"input file {path} does not exist")
    try:
        cloud = read_point_cloud(path)
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None
    if len(cloud) == 0:
        raise UsageError(f"{path}: point cloud is empty")
    return cloud


def _resolved_xi_max(cfg: EstimatorConfig, tau) -> float:
    xi_max = auto_xi_max(tau) if cfg.xi_max == "auto" else float(cfg.xi_max)
    if not xi_max > cfg.xi_min:
        xi_max = cfg.xi_min * 10
    return xi_max


def cmd_estimate(args) -> int:
    cfg = _estimator_config(args)
    rc = RunConfig("estimate", cfg, args.method, args.input, args.output, seed=args.seed,
                   report_format=_format_for(args.output, args.format))
    cloud = _load(args.input)
    res = run_estimator(cloud, args.method, cfg, frames_from=args.frames_from)
    report = make_report(res, rc.echo(), accuracy_aggregates(res, cloud))
    write_report(report, rc.report_format, args.output)
    return EXIT_OK


def cmd_init(args) -> int:
    cfg = _estimator_config(args)
    if args.method == "pca":
        raise UsageError("init needs curvatures; use --method manifold or varifold")
    rc = RunConfig("init", cfg, args.method, args.input, args.output, seed=args.seed)
    cloud = _load(args.input)
    if len(cloud) < 2:
        raise UsageError("init needs at least two points")
    res = run_estimator(cloud, args.method, cfg, frames_from=args.frames_from)
    xi_max = _resolved_xi_max(cfg, res.tau[~res.flagged])
    s_nbr = neighbor_scales(build_index(cloud), args.nbr_k)
    colors = cloud.colors if cloud.colors is not None else np.full((len(cloud), 3), 0.5)
    prims = []
    for i in range(len(cloud)):
        R, s = warmup_covariance(res.frame(i), res.curvature(i), s_nbr[i], cfg.xi_min, xi_max)
        prim = GaussianPrimitive(cloud.positions[i], R, s, args.opacity, colors[i])
        problems = validate(prim)
        if problems:
            raise RuntimeError(f"primitive {i}: {problems}")
        q = Rotation.from_matrix(R).as_quat()  # x, y, z, w
        q = np.r_[q[3], q[:3]]
        if q[0] < 0:
            q = -q
        prims.append({"position": prim.position, "rotation_wxyz": q / np.linalg.norm(q),
                      "scales": prim.scales, "opacity": prim.opacity, "color": prim.color,
                      "flagged": bool(res.flagged[i])})
    echo = {**rc.echo(), "xi_max": xi_max, "nbr_k": args.nbr_k, "opacity": args.opacity, **res.params}
    report = {"schema_version": 1, "config": echo, "primitives": prims, "timings": res.timings}
    _atomic_write(args.output, dumps_report(report).encode())
    return EXIT_OK


def cmd_upsample(args) -> int:
    cfg = _estimator_config(args)
    if args.method == "pca":
        raise UsageError("upsample needs curvatures; use --method manifold or varifold")
    if not args.output.lower().endswith((".ply", ".csv")):
        raise UsageError("upsample output must be .ply or .csv")
    cloud = _load(args.input)
    res = run_estimator(cloud, args.method, cfg, frames_from=args.frames_from)
    pos, colors, _ = upsample_flat_regions(cloud, res.mac, cfg.xi_min, k=args.up_k)
    all_pos = np.concatenate([cloud.positions, pos])
    all_col = None if cloud.colors is None else np.concatenate([cloud.colors, colors])
    is_new = np.r_[np.zeros(len(cloud), np.uint8), np.ones(len(pos), np.uint8)]
    out = PointCloud(all_pos, colors=all_col)
    write_point_cloud(args.output, out, extra={"is_new": is_new})
    print(f"added {len(pos)} points to {len(cloud)}")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _estimator_config(args)
    try:
        surface = parse_surface(args.surface)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.n < cfg.k_neighbors + 1:
        raise UsageError(f"--n must be at least k + 1 = {cfg.k_neighbors + 1}")
    rc = RunConfig("bench", cfg, args.method, surface=args.surface, seed=args.seed,
                   output=args.output, report_format=_format_for(args.output, args.format))
    cloud = sample_surface(surface, args.n, seed=args.seed, noise_sigma=args.sigma, scheme=args.scheme)
    res = run_estimator(cloud, args.method, cfg, frames_from=args.frames_from)
    aggs = accuracy_aggregates(res, cloud)
    bad = check_thresholds(aggs, acceptance_thresholds(surface, args.method))
    echo = {**rc.echo(), "n": args.n, "sigma": args.sigma, "scheme": args.scheme}
    if args.output:
        report = make_report(res, echo, aggs, extra={"threshold_failures": bad})
        write_report(report, rc.report_format, args.output)
    summary = {k: v for k, v in aggs.items() if k.startswith("median")}
    print(json.dumps({"passed": not bad, **summary}, sort_keys=True))
    for b in bad:
        print(f"threshold failed: {b}", file=sys.stderr)
    return EXIT_THRESHOLD if bad else EXIT_OK


COMPARE_COLUMNS = ("sigma", "method", "median_normal_error_deg", "p90_normal_error_deg",
                   "median_abs_curvature_error", "p90_abs_curvature_error")


def cmd_compare(args) -> int:
    cfg = _estimator_config(args)
    try:
        surface = parse_surface(args.surface)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COMPARE_COLUMNS)
    for sigma in args.sigma_sweep:
        cloud = sample_surface(surface, args.n, seed=args.seed, noise_sigma=sigma, scheme=args.scheme)
        for method in METHODS:
            aggs = accuracy_aggregates(run_estimator(cloud, method, cfg, frames_from=args.frames_from), cloud)
            w.writerow([f"{sigma:.9g}", method] + [
                "nan" if aggs.get(c) is None else f"{aggs[c]:.9g}" for c in COMPARE_COLUMNS[2:]])
    if args.output:
        _atomic_write(args.output, buf.getvalue().encode())
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


_COMMANDS = {"estimate": cmd_estimate, "init": cmd_init, "upsample": cmd_upsample,
             "bench": cmd_bench, "compare": cmd_compare}


def cli_main(argv=None) -> int:
    """Run the CLI and return its exit code (0 ok, 1 threshold failure, 2 usage error)."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"splatgeom: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)


def main():
    sys.exit(cli_main())
