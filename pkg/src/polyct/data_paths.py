"""
Packaged data files and the POLYCT_DATA_DIR override.

An override ``solver_defaults.json`` only needs the solver sections (and keys) it changes; everything
else comes from the packaged copy.
"""

from __future__ import annotations

import json
import logging
import os
from functools import lru_cache
from pathlib import Path
from typing import Any, Literal

from .errors import ConfigError

logger = logging.getLogger(__name__)

DATA_DIR_ENV = "POLYCT_DATA_DIR"
DataFileName = Literal["solver_defaults.json"]
DATA_FILES: frozenset[str] = frozenset({"solver_defaults.json"})

STEP_RULE_NAMES = ("general", "positive_meas", "gaussian")
# section -> keys every merged defaults document must carry
REQUIRED_KEYS: dict[str, tuple[str, ...]] = {
    "exact": ("step_size", "reference_intensity"),
    "mse_gd": ("step_multiplier", "grid"),
    "polyak_sgm": ("fallback_multiplier",),
    "admm": ("rho_multiplier", "grid", "cg_iters"),
}


def packaged_path(filename: DataFileName) -> Path:
    return Path(__file__).resolve().parent / "data" / filename


def override_dir() -> Path | None:
    raw = (os.getenv(DATA_DIR_ENV) or "").strip()
    return Path(raw).expanduser().resolve() if raw else None


def data_path(filename: DataFileName) -> Path:
    """The override copy when POLYCT_DATA_DIR holds one, else the packaged file."""
    if filename not in DATA_FILES:
        raise ValueError(f"Unsupported data file: {filename}")
    directory = override_dir()
    if directory is not None and (directory / filename).is_file():
        return directory / filename
    packaged = packaged_path(filename)
    if not packaged.is_file():
        raise FileNotFoundError(f"Packaged data file {filename!r} is missing from {packaged.parent}")
    return packaged


@lru_cache(maxsize=8)
def _load_json_cached(path_str: str) -> dict[str, Any]:
    path_obj = Path(path_str)
    try:
        raw = path_obj.read_text(encoding="utf-8")
    except OSError as exc:
        raise ValueError(f"Could not read data file {path_obj.name!r}: {exc!s}") from exc
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ValueError(f"Invalid JSON in data file {path_obj.name!r}. {exc!s}") from exc
    if not isinstance(data, dict):
        raise ValueError(f"Data file {path_obj.name!r} must contain a JSON object")
    return data


def _merge_sections(base: dict[str, Any], override: dict[str, Any]) -> dict[str, Any]:
    merged = {key: dict(value) if isinstance(value, dict) else value for key, value in base.items()}
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = {**merged[key], **value}
        else:
            merged[key] = value
    return merged


def _positive(section: str, key: str, value: Any) -> None:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not value > 0:
        raise ConfigError(f"solver_defaults: {section}.{key} must be a positive number, got {value!r}")


def check_solver_defaults(data: dict[str, Any]) -> None:
    for section, keys in REQUIRED_KEYS.items():
        entry = data.get(section)
        if not isinstance(entry, dict):
            raise ConfigError(f"solver_defaults: missing section {section!r}")
        missing = [k for k in keys if k not in entry]
        if missing:
            raise ConfigError(f"solver_defaults: {section} is missing {missing}")
    step = data["exact"]["step_size"]
    if isinstance(step, str):
        if step not in STEP_RULE_NAMES:
            raise ConfigError(f"solver_defaults: exact.step_size must be one of {list(STEP_RULE_NAMES)} or a number")
    else:
        _positive("exact", "step_size", step)
    _positive("exact", "reference_intensity", data["exact"]["reference_intensity"])
    _positive("mse_gd", "step_multiplier", data["mse_gd"]["step_multiplier"])
    _positive("polyak_sgm", "fallback_multiplier", data["polyak_sgm"]["fallback_multiplier"])
    _positive("admm", "rho_multiplier", data["admm"]["rho_multiplier"])
    _positive("admm", "cg_iters", data["admm"]["cg_iters"])
    for section in ("mse_gd", "admm"):
        grid = data[section]["grid"]
        if not isinstance(grid, list) or not grid:
            raise ConfigError(f"solver_defaults: {section}.grid must be a nonempty list")
        for value in grid:
            _positive(section, "grid", value)


def solver_defaults() -> dict[str, Any]:
    """Committed baseline multipliers and tuning grids, with any POLYCT_DATA_DIR override merged in."""
    packaged = packaged_path("solver_defaults.json")
    merged = _merge_sections(_load_json_cached(str(packaged)), {})
    chosen = data_path("solver_defaults.json")
    if chosen != packaged:
        logger.debug("Merging solver defaults override from %s", chosen)
        merged = _merge_sections(merged, _load_json_cached(str(chosen)))
    check_solver_defaults(merged)
    return merged
