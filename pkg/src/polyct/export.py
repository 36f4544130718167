"""File formats: 16-bit PGM images with a JSON scale sidecar, flat image CSV, matrix triplets, counts, traces."""

from __future__ import annotations

import csv
import json
import logging
import math
from pathlib import Path
from typing import Any

import numpy as np
import scipy.sparse as sp

from .geometry import SystemMatrix
from .model import Image, MeasurementSet
from .solvers import SolverTrace

logger = logging.getLogger(__name__)

TRACE_FIELDS = ["iter", "dist_to_truth", "avg_movement", "loss", "wall_ms"]
PGM_MAXVAL = 65535


def format_float(value: float | None) -> str:
    """Shortest round-tripping text; empty for missing values."""
    if value is None:
        return ""
    return repr(float(value))


def write_pgm(path: str | Path, image: Image, grid_side: int) -> Path:
    """
    Binary 16-bit PGM, max-normalised after clipping negatives to 0. The scale (image max) goes to
    ``<name>.json`` next to it so densities can be recovered.
    """
    path = Path(path)
    arr = np.asarray(image, dtype=np.float64).ravel()
    if arr.size != grid_side * grid_side:
        raise ValueError(f"image has {arr.size} entries, expected {grid_side}^2")
    clipped = np.maximum(arr, 0.0)
    scale = float(clipped.max()) if clipped.size else 0.0
    levels = np.zeros_like(clipped) if scale == 0.0 else np.rint(clipped / scale * PGM_MAXVAL)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"P5\n{grid_side} {grid_side}\n{PGM_MAXVAL}\n".encode("ascii")
    path.write_bytes(header + levels.astype(">u2").tobytes())
    sidecar = path.with_suffix(".json")
    sidecar.write_text(
        json.dumps({"scale": scale, "maxval": PGM_MAXVAL, "grid_side": grid_side}, indent=2) + "\n",
        encoding="utf-8",
    )
    return path


def read_pgm(path: str | Path) -> Image:
    """Inverse of ``write_pgm`` up to 16-bit quantisation."""
    path = Path(path)
    raw = path.read_bytes()
    parts = raw.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise ValueError(f"{path.name!r} is not a binary PGM")
    width, height, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    pixels = np.frombuffer(raw[len(raw) - 2 * width * height :], dtype=">u2").astype(np.float64)
    meta = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    return pixels / maxval * float(meta["scale"])


def write_image_csv(path: str | Path, image: Image) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["index", "value"])
        for k, v in enumerate(np.asarray(image, dtype=np.float64).ravel()):
            writer.writerow([k, format_float(v)])
    return path


def read_image_csv(path: str | Path) -> Image:
    path = Path(path)
    values: list[float] = []
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            try:
                values.append(float(row["value"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"Bad image row in {path.name!r}: {row!r} ({exc!s})") from exc
    return np.asarray(values, dtype=np.float64)


def write_matrix_triplets(path: str | Path, A: SystemMatrix) -> Path:
    """First line is a JSON header {n, d, format}; then ``row,col,weight`` for every stored entry."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    coo = sp.coo_matrix(A.matrix)
    order = np.lexsort((coo.col, coo.row))
    header = {"n": A.n_rows, "d": A.n_cols, "format": "dense" if A.dense else "triplet"}
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(json.dumps(header) + "\n")
        writer = csv.writer(f)
        writer.writerow(["row", "col", "weight"])
        for k in order:
            writer.writerow([int(coo.row[k]), int(coo.col[k]), format_float(coo.data[k])])
    return path


def read_matrix_triplets(path: str | Path) -> SystemMatrix:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as f:
        try:
            header = json.loads(f.readline())
            n, d = int(header["n"]), int(header["d"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"Bad matrix header in {path.name!r}: {exc!s}") from exc
        rows, cols, vals = [], [], []
        for row in csv.DictReader(f):
            rows.append(int(row["row"]))
            cols.append(int(row["col"]))
            vals.append(float(row["weight"]))
    matrix = sp.csr_matrix((vals, (rows, cols)), shape=(n, d))
    if header.get("format") == "dense":
        return SystemMatrix(matrix.toarray(), dense=True)
    return SystemMatrix(matrix)


COUNTS_FIELDS = ["window", "ray", "count"]


def write_counts_csv(path: str | Path, y: MeasurementSet) -> Path:
    rows = [
        {"window": k, "ray": i, "count": format_float(c)}
        for k in range(y.n_windows)
        for i, c in enumerate(y.window(k))
    ]
    return write_json_or_csv(path, rows, COUNTS_FIELDS)


def read_counts_csv(path: str | Path) -> MeasurementSet:
    """Counts written by write_counts_csv; windows must appear in order, each with the same ray count."""
    path = Path(path)
    per_window: dict[int, list[float]] = {}
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            try:
                per_window.setdefault(int(row["window"]), []).append(float(row["count"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"Bad counts row in {path.name!r}: {row!r} ({exc!s})") from exc
    if sorted(per_window) != list(range(len(per_window))) or not per_window:
        raise ValueError(f"{path.name!r} must hold windows 0..W-1")
    parts = [per_window[k] for k in range(len(per_window))]
    bounds: list[tuple[int, int]] = []
    offset = 0
    for part in parts:
        bounds.append((offset, offset + len(part)))
        offset += len(part)
    return MeasurementSet(np.concatenate([np.asarray(p, dtype=np.float64) for p in parts]), tuple(bounds))


def trace_rows(trace: SolverTrace) -> list[dict[str, str]]:
    return [
        {
            "iter": str(r.iteration),
            "dist_to_truth": format_float(r.dist_to_truth),
            "avg_movement": format_float(r.avg_movement),
            "loss": format_float(r.loss),
            "wall_ms": format_float(r.wall_ms),
        }
        for r in trace.records
    ]


def write_json_or_csv(path: str | Path, rows: list[dict[str, Any]], csv_fieldnames: list[str] | None) -> Path:
    """Write rows as CSV (if csv_fieldnames and .csv suffix) or JSON. Creates parent dirs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() == ".csv" and csv_fieldnames:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=csv_fieldnames)
            writer.writeheader()
            writer.writerows(rows)
    else:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(rows, f, ensure_ascii=False, indent=2)
    return path


def write_trace_csv(path: str | Path, trace: SolverTrace) -> Path:
    return write_json_or_csv(path, trace_rows(trace), TRACE_FIELDS)


def to_json_text(payload: dict[str, Any]) -> str:
    """Sorted, indented JSON; non-finite floats become null."""
    return json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n"


def write_json(path: str | Path, payload: dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(to_json_text(payload), encoding="utf-8")
    logger.debug("Wrote %s", path)
    return path


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.floating, float)):
        f = float(value)
        return f if math.isfinite(f) else None
    if isinstance(value, np.integer):
        return int(value)
    return value
