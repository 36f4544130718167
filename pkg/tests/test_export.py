from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from polyct.export import (
    format_float,
    read_counts_csv,
    read_image_csv,
    read_matrix_triplets,
    read_pgm,
    to_json_text,
    write_counts_csv,
    write_image_csv,
    write_json,
    write_matrix_triplets,
    write_pgm,
    write_trace_csv,
)
from polyct.geometry import ParallelBeamGeometry, SystemMatrix, build_radon_matrix
from polyct.model import MeasurementSet
from polyct.solvers import SolverTrace, TraceRecord


def test_format_float() -> None:
    assert format_float(None) == ""
    assert format_float(0.1) == "0.1"
    assert float(format_float(1.0 / 3.0)) == 1.0 / 3.0


def test_pgm_header_and_scale(tmp_path) -> None:
    image = np.array([0.0, 0.5, 1.0, -0.2])
    path = write_pgm(tmp_path / "img.pgm", image, 2)
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n2 2\n65535\n")
    assert len(raw) == len(b"P5\n2 2\n65535\n") + 8
    meta = json.loads((tmp_path / "img.json").read_text(encoding="utf-8"))
    assert meta["scale"] == 1.0
    back = read_pgm(path)
    assert np.allclose(back, [0.0, 0.5, 1.0, 0.0], atol=1.0 / 65535)


def test_pgm_of_all_zero_image(tmp_path) -> None:
    path = write_pgm(tmp_path / "zero.pgm", np.zeros(9), 3)
    assert np.array_equal(read_pgm(path), np.zeros(9))


def test_pgm_rejects_wrong_size(tmp_path) -> None:
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "bad.pgm", np.zeros(5), 2)


def test_read_pgm_rejects_other_formats(tmp_path) -> None:
    path = tmp_path / "text.pgm"
    path.write_bytes(b"P2\n1 1\n255\n0\n")
    with pytest.raises(ValueError):
        read_pgm(path)


def test_image_csv_is_exact(tmp_path) -> None:
    image = np.array([0.1, 1.0 / 3.0, -2.5e-7])
    path = write_image_csv(tmp_path / "img.csv", image)
    assert np.array_equal(read_image_csv(path), image)
    with open(path, newline="", encoding="utf-8") as f:
        assert next(csv.reader(f)) == ["index", "value"]


def test_image_csv_reports_bad_rows(tmp_path) -> None:
    path = tmp_path / "bad.csv"
    path.write_text("index,value\n0,abc\n", encoding="utf-8")
    with pytest.raises(ValueError) as excinfo:
        read_image_csv(path)
    assert "bad.csv" in str(excinfo.value)


def test_matrix_triplets_keep_sparse_and_dense_kinds(tmp_path) -> None:
    A = build_radon_matrix(ParallelBeamGeometry(n_views=2, n_cells=6, grid_side=4, pixel_size=0.25))
    back = read_matrix_triplets(write_matrix_triplets(tmp_path / "A.txt", A))
    assert not back.dense
    assert back.shape == A.shape
    assert np.array_equal(back.to_dense(), A.to_dense())
    dense = SystemMatrix.from_dense(np.array([[1.0, 0.0], [0.0, 2.0], [0.0, 0.0]]))
    back_dense = read_matrix_triplets(write_matrix_triplets(tmp_path / "D.txt", dense))
    assert back_dense.dense
    assert back_dense.shape == (3, 2)


def test_matrix_triplets_reject_bad_header(tmp_path) -> None:
    path = tmp_path / "A.txt"
    path.write_text("not json\nrow,col,weight\n", encoding="utf-8")
    with pytest.raises(ValueError):
        read_matrix_triplets(path)


def test_counts_csv_keeps_window_boundaries(tmp_path) -> None:
    y = MeasurementSet(np.array([5.0, 6.0, 7.0, 1.0, 2.0, 3.0]), ((0, 3), (3, 6)))
    path = write_counts_csv(tmp_path / "counts.csv", y)
    back = read_counts_csv(path)
    assert back.window_boundaries == y.window_boundaries
    assert np.array_equal(back.counts, y.counts)


def test_counts_csv_needs_contiguous_windows(tmp_path) -> None:
    path = tmp_path / "counts.csv"
    path.write_text("window,ray,count\n1,0,4.0\n", encoding="utf-8")
    with pytest.raises(ValueError):
        read_counts_csv(path)


def test_trace_csv_columns(tmp_path) -> None:
    trace = SolverTrace(solver="exact", step_size=0.1)
    trace.records.append(TraceRecord(1, None, 0.5, 2.0, 0.0))
    trace.records.append(TraceRecord(2, 0.25, 0.1, 1.0, 0.0))
    path = write_trace_csv(tmp_path / "trace.csv", trace)
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0]) == ["iter", "dist_to_truth", "avg_movement", "loss", "wall_ms"]
    assert rows[0]["dist_to_truth"] == ""
    assert rows[1]["iter"] == "2"


def test_json_writes_null_for_non_finite_values(tmp_path) -> None:
    payload = {"b": float("nan"), "a": np.float64(1.5), "c": [np.int64(3), float("inf")], "d": np.array([1.0])}
    text = to_json_text(payload)
    assert json.loads(text) == {"a": 1.5, "b": None, "c": [3, None], "d": [1.0]}
    assert text.index('"a"') < text.index('"b"')
    path = write_json(tmp_path / "nested" / "out.json", payload)
    assert path.read_text(encoding="utf-8") == text
