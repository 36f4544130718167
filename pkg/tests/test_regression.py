"""Reduced CT regression runs: small grids, one seed, high intensity; thresholds scaled to match."""

from __future__ import annotations

from pathlib import Path

from polyct.experiments import (
    build_config_from_flat_dict,
    run_contrast_recovery,
    run_ct_views_sweep,
)
from polyct.geometry import make_pmma_phantom

CT_BASE: dict[str, object] = {
    "scenario": "ct_views_sweep",
    "seeds": [0],
    "grid_side": 8,
    "n_cells": 12,
    "intensity": 1e6,
    "n_bins": 6,
    "n_windows": 2,
    "constraint": {"type": "nonneg"},
    "max_iters": 3000,
    "record_wall_time": False,
    "write_images": False,
    "workers": 1,
}


def _mean_rmse(report: dict[str, object], solver: str) -> dict[str, float]:
    summary = report["summary"]
    assert isinstance(summary, list)
    return {r["setting"]: float(r["rmse_mean"]) for r in summary if r["solver"] == solver and r["rmse_mean"] != ""}


def test_exact_recovers_pmma_with_many_views_and_degrades_with_few(tmp_path: Path) -> None:
    cfg = build_config_from_flat_dict({**CT_BASE, "out_dir": str(tmp_path), "views": [2, 20], "solvers": ["exact"]})
    report = run_ct_views_sweep(cfg)
    peak = float(make_pmma_phantom(8).max())
    means = _mean_rmse(report, "exact")

    assert means["20"] <= 0.05 * peak
    assert means["2"] >= 3.0 * means["20"]
    assert report["rmse_ratio_fewest_to_most_views"]["exact"] == means["2"] / means["20"]


def test_exact_is_on_par_with_the_best_baseline(tmp_path: Path) -> None:
    cfg = build_config_from_flat_dict(
        {**CT_BASE, "out_dir": str(tmp_path), "views": [10], "solvers": ["exact", "mse_gd", "polyak_sgm", "admm"]}
    )
    report = run_ct_views_sweep(cfg)
    peak = float(make_pmma_phantom(8).max())
    exact = _mean_rmse(report, "exact")["10"]
    baselines = [v["10"] for s in ("mse_gd", "polyak_sgm", "admm") if "10" in (v := _mean_rmse(report, s))]

    assert baselines
    # within 10% of the best baseline, or both already below 2% of the peak density
    assert exact <= max(1.10 * min(baselines), 0.02 * peak)


def test_contrast_recovery_keeps_roi_means_and_their_order(tmp_path: Path) -> None:
    cfg = build_config_from_flat_dict(
        {
            "scenario": "contrast_recovery",
            "out_dir": str(tmp_path),
            "seeds": [0],
            "contrast_grid_side": 16,
            "n_views": 30,
            "n_cells": 24,
            "contrast_intensity": 1e6,
            "n_bins": 6,
            "n_windows": 2,
            "constraint": {"type": "nonneg"},
            "max_iters": 5000,
            "record_wall_time": False,
            "write_images": False,
            "workers": 1,
        }
    )
    report = run_contrast_recovery(cfg)

    assert report["roi_rank_order_preserved"] == {"0": True}
    assert len(report["rows"]) == 3
    for row in report["rows"]:
        assert float(row["relative_error"]) <= 0.15
