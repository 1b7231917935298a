"""Persistence: binary field files with JSON sidecars and CSV step series.

Field files (``.mmfd``) are a 32-byte little-endian header followed by the
raw float64 payload in C order::

    magic  b"MMFD"   version u32   ndim u32   reserved u32   then ndim u64 extents
"""
from __future__ import annotations

import csv
import json
import math
import struct
from pathlib import Path

import numpy as np

from .grid import TrajectoryStore
from .kinematics import build_kinematics

MAGIC = b"MMFD"
VERSION = 1
_HEAD = struct.Struct("<4sIII")


class FormatError(ValueError):
    pass


def write_field(path, array: np.ndarray) -> Path:
    path = Path(path)
    arr = np.ascontiguousarray(array, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, arr.ndim, 0))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes(order="C"))
    return path


def read_field(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(_HEAD.size)
        if len(head) < _HEAD.size:
            raise FormatError(f"{path}: truncated header")
        magic, version, ndim, _ = _HEAD.unpack(head)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != int(np.prod(shape)):
        raise FormatError(f"{path}: payload has {data.size} values, header says {shape}")
    return data.reshape(shape).astype(float)


SNAPSHOT_FIELDS = ("eta", "M", "phi", "H")


def export_snapshot(fields: dict, k: int, directory, meta: dict | None = None) -> Path:
    """Write each non-empty field of ``fields`` plus a JSON sidecar; returns the sidecar path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = f"snap_{k:06d}"
    written = {}
    for name, arr in fields.items():
        if arr is None or np.size(arr) == 0:
            continue
        fname = f"{stem}_{name}.mmfd"
        write_field(directory / fname, arr)
        written[name] = {"file": fname, "shape": list(np.shape(arr))}
    side = {"format": "MMFD", "version": VERSION, "k": k, "fields": written}
    side.update(meta or {})
    path = directory / f"{stem}.json"
    path.write_text(json.dumps(side, indent=2, sort_keys=True))
    return path


def read_snapshot(directory, k: int) -> tuple[dict, dict]:
    directory = Path(directory)
    side = json.loads((directory / f"snap_{k:06d}.json").read_text())
    fields = {name: read_field(directory / info["file"]) for name, info in side["fields"].items()}
    return fields, side


SERIES_COLUMNS = ("k", "t", "W", "det_penalty", "hessian", "anisotropy", "stray", "exchange", "saturation",
                  "total", "dissipation", "residual_eta", "residual_M", "min_det", "cn_residual", "cn_tolerance",
                  "iterations", "status")


def series_rows(trajectory: TrajectoryStore) -> list[dict]:
    rows = []
    for k, s in enumerate(trajectory.snapshots):
        info = s.info or {}
        row = {"k": k, "t": s.t}
        for part in SERIES_COLUMNS[2:10]:
            row[part] = getattr(s.energy, part)
        row["dissipation"] = s.dissipation
        row["residual_eta"] = info.get("residual_eta", math.nan)
        row["residual_M"] = info.get("residual_M", math.nan)
        row["min_det"] = info.get("min_det", build_kinematics(s.eta, trajectory.grid).min_det)
        row["cn_residual"] = info.get("cn_residual", math.nan)
        row["cn_tolerance"] = info.get("cn_tolerance", math.nan)
        row["iterations"] = info.get("iterations", 0)
        row["status"] = s.status
        rows.append(row)
    return rows


def _fmt(v) -> str:
    if isinstance(v, (bool, str)):
        return str(v)
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def export_series(trajectory: TrajectoryStore, path) -> Path:
    """One CSV row per stored step (k = 0 included), 17 significant digits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(SERIES_COLUMNS)
        for row in series_rows(trajectory):
            wr.writerow([_fmt(row[c]) for c in SERIES_COLUMNS])
    return path


def read_series(path) -> list[dict]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rec = {}
            for key, val in row.items():
                if key == "status":
                    rec[key] = val
                elif key in ("k", "iterations"):
                    rec[key] = int(val)
                else:
                    rec[key] = float(val)
            out.append(rec)
    return out


def write_report(report: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    def clean(o):
        if isinstance(o, dict):
            return {str(k): clean(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [clean(v) for v in o]
        if isinstance(o, np.ndarray):
            return clean(o.tolist())
        if isinstance(o, (np.floating, float)):
            f = float(o)
            return f if math.isfinite(f) else str(f)
        if isinstance(o, np.integer):
            return int(o)
        if isinstance(o, np.bool_):
            return bool(o)
        return o

    path.write_text(json.dumps(clean(report), indent=2, sort_keys=True))
    return path
