"""Point cloud files (PLY, CSV) and estimation reports (JSON, CSV)."""
from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from pathlib import Path
from typing import Optional

import numpy as np

from .types import EstimateResult, PointCloud

SCHEMA_VERSION = 1

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_PLY_NAMES = {"i1": "char", "u1": "uchar", "i2": "short", "u2": "ushort",
              "i4": "int", "u4": "uint", "f4": "float", "f8": "double"}
_REQUIRED_KINDS = {"x": "f", "y": "f", "z": "f", "nx": "f", "ny": "f", "nz": "f",
                   "red": "u1", "green": "u1", "blue": "u1"}


class PlyError(ValueError):
    pass


class PlyHeaderError(PlyError):
    """Malformed PLY header."""


class PlyTruncatedError(PlyError):
    """Payload shorter than the header promises."""


class PlyPropertyError(PlyError):
    """Property type the reader does not support."""


class CsvFormatError(ValueError):
    pass


# ----------------------------------------------------------------------- PLY

def _parse_header(raw: bytes):
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise PlyHeaderError("line 1: not a PLY file or missing end_header")
    nl = raw.find(b"\n", end)
    if nl < 0:
        raise PlyHeaderError(f"byte {end}: end_header not terminated by a newline")
    lines = raw[:nl].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements: list[dict] = []
    for lineno, line in enumerate(lines, start=1):
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info", "ply", "end_header"):
            continue
        if tok[0] == "format":
            if len(tok) != 3:
                raise PlyHeaderError(f"line {lineno}: malformed format line")
            fmt = tok[1]
            if fmt not in ("ascii", "binary_little_endian"):
                raise PlyPropertyError(f"line {lineno}: unsupported format {fmt!r}")
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise PlyHeaderError(f"line {lineno}: malformed element line")
            elements.append({"name": tok[1], "count": int(tok[2]), "props": [], "line": lineno})
        elif tok[0] == "property":
            if not elements:
                raise PlyHeaderError(f"line {lineno}: property before any element")
            if len(tok) == 5 and tok[1] == "list":
                elements[-1]["props"].append((tok[4], "list", lineno))
            elif len(tok) == 3:
                if tok[1] not in _PLY_TYPES:
                    raise PlyPropertyError(f"line {lineno}: unsupported property type {tok[1]!r}")
                elements[-1]["props"].append((tok[2], _PLY_TYPES[tok[1]], lineno))
            else:
                raise PlyHeaderError(f"line {lineno}: malformed property line")
        else:
            raise PlyHeaderError(f"line {lineno}: unexpected keyword {tok[0]!r}")
    if fmt is None:
        raise PlyHeaderError("line 2: missing format line")
    return fmt, elements, nl + 1, len(lines)


def _check_vertex_props(el) -> None:
    names = [p[0] for p in el["props"]]
    for name, kind, lineno in el["props"]:
        if kind == "list":
            raise PlyPropertyError(f"line {lineno}: list property {name!r} in vertex element")
        want = _REQUIRED_KINDS.get(name)
        if want == "f" and kind not in ("f4", "f8"):
            raise PlyPropertyError(f"line {lineno}: property {name!r} must be float or double")
        if want == "u1" and kind != "u1":
            raise PlyPropertyError(f"line {lineno}: property {name!r} must be uchar")
    for axis in "xyz":
        if axis not in names:
            raise PlyHeaderError(f"line {el['line']}: vertex element lacks property {axis!r}")


def read_ply(path) -> tuple[PointCloud, dict]:
    """Read vertices of an ASCII or binary little-endian PLY file.

    Returns the cloud and a dict of any extra scalar vertex properties.
    """
    raw = Path(path).read_bytes()
    fmt, elements, offset, header_lines = _parse_header(raw)
    vidx = next((k for k, e in enumerate(elements) if e["name"] == "vertex"), None)
    if vidx is None:
        raise PlyHeaderError("line 1: no vertex element")
    vertex = elements[vidx]
    _check_vertex_props(vertex)
    dtype = np.dtype([(name, "<" + kind) for name, kind, _ in vertex["props"]])
    count = vertex["count"]
    if fmt == "binary_little_endian":
        for el in elements[:vidx]:
            if any(kind == "list" for _, kind, _ in el["props"]):
                raise PlyPropertyError(
                    f"line {el['line']}: list property in element {el['name']!r} preceding vertices")
            size = np.dtype([(n, "<" + k) for n, k, _ in el["props"]]).itemsize
            offset += size * el["count"]
        need = offset + dtype.itemsize * count
        if len(raw) < need:
            raise PlyTruncatedError(
                f"byte {len(raw)}: payload ends early, vertex data needs bytes {offset}..{need}")
        data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    else:
        body = raw[offset:].decode("ascii", errors="replace").splitlines()
        skip = sum(e["count"] for e in elements[:vidx])
        first_line = header_lines + 1 + skip
        rows = body[skip:skip + count]
        if len(rows) < count:
            raise PlyTruncatedError(
                f"line {header_lines + 1 + len(body)}: expected {count} vertex lines, found {len(rows)}")
        data = np.empty(count, dtype=dtype)
        nprop = len(dtype.names)
        for k, line in enumerate(rows):
            tok = line.split()
            if len(tok) != nprop:
                raise PlyTruncatedError(f"line {first_line + k}: expected {nprop} values, got {len(tok)}")
            try:
                data[k] = tuple(float(t) if dtype[n].kind == "f" else int(t) for t, n in zip(tok, dtype.names))
            except ValueError as exc:
                raise PlyHeaderError(f"line {first_line + k}: {exc}") from None
    pos = np.stack([data["x"], data["y"], data["z"]], axis=1).astype(np.float64)
    names = set(dtype.names)
    colors = None
    if {"red", "green", "blue"} <= names:
        colors = np.stack([data["red"], data["green"], data["blue"]], axis=1) / 255.0
    normals = None
    if {"nx", "ny", "nz"} <= names:
        normals = np.stack([data["nx"], data["ny"], data["nz"]], axis=1).astype(np.float64)
    known = {"x", "y", "z", "red", "green", "blue", "nx", "ny", "nz"}
    extra = {n: np.array(data[n]) for n in dtype.names if n not in known}
    return PointCloud(pos, colors=colors, normals=normals), extra


def write_ply(path, cloud: PointCloud, binary: bool = True, extra: Optional[dict] = None) -> None:
    """Write vertices (double positions, optional uchar colors, double normals, extra scalars)."""
    n = len(cloud)
    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    if cloud.normals is not None:
        fields += [("nx", "<f8"), ("ny", "<f8"), ("nz", "<f8")]
    if cloud.colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    extra = extra or {}
    extra = {k: np.asarray(v).astype(np.uint8) if np.asarray(v).dtype == bool else np.asarray(v)
             for k, v in extra.items()}
    for name, arr in extra.items():
        fields.append((name, arr.dtype.newbyteorder("<").str))
    data = np.empty(n, dtype=fields)
    for a, col in zip("xyz", cloud.positions.T):
        data[a] = col
    if cloud.normals is not None:
        for a, col in zip(("nx", "ny", "nz"), cloud.normals.T):
            data[a] = col
    if cloud.colors is not None:
        rgb = np.clip(np.rint(cloud.colors * 255), 0, 255).astype(np.uint8)
        for a, col in zip(("red", "green", "blue"), rgb.T):
            data[a] = col
    for name, arr in extra.items():
        data[name] = arr
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {n}"]
    for name, code in fields:
        header.append(f"property {_PLY_NAMES[np.dtype(code).str[1:]]} {name}")
    header.append("end_header")
    buf = io.BytesIO()
    buf.write(("\n".join(header) + "\n").encode("ascii"))
    if binary:
        buf.write(data.tobytes())
    else:
        for row in data:
            buf.write((" ".join(repr(float(v)) if data.dtype[k].kind == "f" else str(int(v))
                                for k, v in enumerate(row)) + "\n").encode("ascii"))
    _atomic_write(path, buf.getvalue())


def read_csv_cloud(path) -> PointCloud:
    """Read a CSV with header ``x,y,z[,r,g,b]``; colors mapped from [0,255] to [0,1]."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CsvFormatError("line 1: empty file") from None
        if header[:3] != ["x", "y", "z"] or header[3:] not in ([], ["r", "g", "b"]):
            raise CsvFormatError(f"line 1: expected header x,y,z[,r,g,b], got {','.join(header)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise CsvFormatError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(c) for c in row])
            except ValueError as exc:
                raise CsvFormatError(f"line {lineno}: {exc}") from None
    arr = np.array(rows, dtype=float).reshape(-1, len(header))
    colors = arr[:, 3:6] / 255.0 if len(header) == 6 else None
    return PointCloud(arr[:, :3], colors=colors)


def write_csv_cloud(path, cloud: PointCloud) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    has_c = cloud.colors is not None
    w.writerow(["x", "y", "z"] + (["r", "g", "b"] if has_c else []))
    for k, p in enumerate(cloud.positions):
        row = [repr(float(v)) for v in p]
        if has_c:
            row += [str(int(v)) for v in np.rint(cloud.colors[k] * 255)]
        w.writerow(row)
    _atomic_write(path, buf.getvalue().encode())


def read_point_cloud(path) -> PointCloud:
    """Read a ``.ply`` or ``.csv`` point cloud (chosen by extension)."""
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return read_ply(path)[0]
    if suffix == ".csv":
        return read_csv_cloud(path)
    raise ValueError(f"unsupported point cloud extension {suffix!r}")


def write_point_cloud(path, cloud: PointCloud, binary: bool = True, extra: Optional[dict] = None) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        write_ply(path, cloud, binary=binary, extra=extra)
    elif suffix == ".csv":
        write_csv_cloud(path, cloud)
    else:
        raise ValueError(f"unsupported point cloud extension {suffix!r}")


# -------------------------------------------------------------------- reports

REPORT_COLUMNS = (
    "index",
    "u1_x", "u1_y", "u1_z", "u2_x", "u2_y", "u2_z", "n_x", "n_y", "n_z",
    "tau1", "tau2",
    "w1_x", "w1_y", "w1_z", "w2_x", "w2_y", "w2_z",
    "mac", "flagged",
)


def _sig(x):
    """Round to 9 significant digits; NaN and inf become None."""
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    x = float(x)
    if not math.isfinite(x):
        return None
    return float(f"{x:.9g}")


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (str, type(None))):
        return obj
    return _sig(obj)


def result_records(result: EstimateResult) -> list[dict]:
    f = result.frames
    mac = result.mac
    recs = []
    diag_names = sorted(result.diagnostics)
    for i in range(len(result)):
        rec = {
            "index": i,
            "u1": f.u1[i], "u2": f.u2[i], "n": f.n[i],
            "tau1": result.tau[i, 0], "tau2": result.tau[i, 1],
            "w1": result.w1[i], "w2": result.w2[i],
            "mac": mac[i], "flagged": bool(result.flagged[i]),
            "diagnostics": {k: result.diagnostics[k][i] for k in diag_names},
        }
        recs.append(rec)
    return recs


def make_report(result: Optional[EstimateResult], config: dict, aggregates: Optional[dict] = None,
                extra: Optional[dict] = None) -> dict:
    """Assemble a JSON-ready report. Timings are kept in their own block."""
    rep = {
        "schema_version": SCHEMA_VERSION,
        "method": None if result is None else result.method,
        "config": dict(config),
        "aggregates": aggregates or {},
        "records": [] if result is None else result_records(result),
        "timings": {} if result is None else dict(result.timings),
    }
    if result is not None:
        rep["config"].update({k: v for k, v in result.params.items()})
    if extra:
        rep.update(extra)
    return _clean(rep)


def dumps_report(report: dict) -> str:
    return json.dumps(_clean(report), sort_keys=True, indent=1, allow_nan=False) + "\n"


def report_csv(report: dict) -> str:
    """One row per point; columns :data:`REPORT_COLUMNS` then ``diag_<name>`` sorted.

    A vector diagnostic expands to ``diag_<name>_0, diag_<name>_1, ...``.
    """
    recs = report.get("records", [])
    diag = sorted({k for r in recs for k in r.get("diagnostics", {})})
    width = {d: max((len(v) if isinstance(v, list) else 0)
                    for r in recs for v in [r["diagnostics"].get(d)]) for d in diag}
    names = []
    for d in diag:
        names += [f"diag_{d}_{k}" for k in range(width[d])] if width[d] else [f"diag_{d}"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(REPORT_COLUMNS) + names)

    def fmt(v):
        if v is None:
            return "nan"
        if isinstance(v, bool):
            return str(int(v))
        if isinstance(v, int):
            return str(v)
        return f"{v:.9g}"

    for r in recs:
        row = [r["index"], *r["u1"], *r["u2"], *r["n"], r["tau1"], r["tau2"], *r["w1"], *r["w2"],
               r["mac"], r["flagged"]]
        for d in diag:
            v = r["diagnostics"].get(d)
            row += (v if isinstance(v, list) else [None] * width[d]) if width[d] else [v]
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_report(results, format: str, path) -> None:
    """Write a report (dict from :func:`make_report`, or a bare EstimateResult) atomically."""
    report = results if isinstance(results, dict) else make_report(results, {})
    if format == "json":
        payload = dumps_report(report)
    elif format == "csv":
        payload = report_csv(report)
    else:
        raise ValueError(f"unknown report format {format!r}")
    _atomic_write(path, payload.encode())


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    directory = path.parent if str(path.parent) else Path(".")
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
