from __future__ import annotations

import json

import pytest

from polyct import data_paths
from polyct.errors import ConfigError


def test_data_path_uses_packaged_copy_without_override(monkeypatch, tmp_path) -> None:
    monkeypatch.delenv("POLYCT_DATA_DIR", raising=False)
    assert data_paths.data_path("solver_defaults.json") == data_paths.packaged_path("solver_defaults.json")

    # an override directory without the file falls back as well
    monkeypatch.setenv("POLYCT_DATA_DIR", str(tmp_path))
    path = data_paths.data_path("solver_defaults.json")
    assert path.parent.name == "data"
    assert path.is_file()


def test_data_dir_override_wins(monkeypatch, tmp_path) -> None:
    (tmp_path / "solver_defaults.json").write_text(json.dumps({"exact": {"step_size": "gaussian"}}), encoding="utf-8")
    monkeypatch.setenv("POLYCT_DATA_DIR", str(tmp_path))

    assert data_paths.data_path("solver_defaults.json") == tmp_path.resolve() / "solver_defaults.json"


def test_data_path_rejects_unknown_files() -> None:
    with pytest.raises(ValueError):
        data_paths.data_path("phantoms.json")  # type: ignore[arg-type]


def test_packaged_solver_defaults_cover_every_solver(monkeypatch) -> None:
    monkeypatch.delenv("POLYCT_DATA_DIR", raising=False)
    defaults = data_paths.solver_defaults()
    assert defaults["exact"]["step_size"] in data_paths.STEP_RULE_NAMES
    assert set(defaults) >= set(data_paths.REQUIRED_KEYS)
    assert all(m > 0 for m in defaults["mse_gd"]["grid"])


def test_partial_override_merges_per_section(monkeypatch, tmp_path) -> None:
    (tmp_path / "solver_defaults.json").write_text(json.dumps({"admm": {"rho_multiplier": 1.0}}), encoding="utf-8")
    monkeypatch.setenv("POLYCT_DATA_DIR", str(tmp_path))

    defaults = data_paths.solver_defaults()

    assert defaults["admm"]["rho_multiplier"] == 1.0
    assert defaults["admm"]["cg_iters"] == 20
    assert defaults["mse_gd"]["step_multiplier"] == 1.0
    # the cached packaged document is left untouched
    monkeypatch.delenv("POLYCT_DATA_DIR")
    assert data_paths.solver_defaults()["admm"]["rho_multiplier"] == 0.1


@pytest.mark.parametrize(
    "override",
    [
        {"exact": {"step_size": "fastest"}},
        {"exact": {"reference_intensity": 0}},
        {"mse_gd": {"grid": []}},
        {"admm": {"grid": [0.1, -1.0]}},
        {"polyak_sgm": None},
    ],
)
def test_invalid_override_raises_config_error(monkeypatch, tmp_path, override: dict[str, object]) -> None:
    (tmp_path / "solver_defaults.json").write_text(json.dumps(override), encoding="utf-8")
    monkeypatch.setenv("POLYCT_DATA_DIR", str(tmp_path))
    with pytest.raises(ConfigError):
        data_paths.solver_defaults()


def test_invalid_json_data_file_is_reported(tmp_path) -> None:
    path = tmp_path / "broken.json"
    path.write_text("{", encoding="utf-8")
    with pytest.raises(ValueError) as excinfo:
        data_paths._load_json_cached(str(path))
    assert "Invalid JSON" in str(excinfo.value)
