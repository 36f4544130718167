from __future__ import annotations

import json
import logging
import threading

import pytest

from polyct.logging_utils import (
    CellContextFilter,
    StructuredLogFormatter,
    cell_context,
    current_context,
    setup_logging,
    structured_logs_enabled,
)


def _record(msg: str = "step %d diverged", args: tuple[object, ...] = (7,)) -> logging.LogRecord:
    return logging.LogRecord("polyct.solvers", logging.WARNING, __file__, 1, msg, args, None)


def test_structured_formatter_emits_one_json_object() -> None:
    payload = json.loads(StructuredLogFormatter().format(_record()))
    assert payload["level"] == "WARNING"
    assert payload["message"] == "step 7 diverged"
    assert payload["logger"] == "polyct.solvers"
    assert "cell" not in payload


def test_cell_context_tags_records() -> None:
    record = _record()
    with cell_context(scenario="ct_views_sweep", cell="views-5_exact_seed-0", solver="exact", seed=0):
        assert CellContextFilter().filter(record)
    assert current_context() == {}
    payload = json.loads(StructuredLogFormatter().format(record))
    assert payload["cell"] == "views-5_exact_seed-0"
    assert payload["seed"] == 0
    assert payload["scenario"] == "ct_views_sweep"
    assert record.cell_tag == "[views-5_exact_seed-0] "


def test_cell_context_nests_and_restores() -> None:
    with cell_context(scenario="contrast_recovery"):
        with cell_context(cell="contrast-1000_exact_seed-2", solver=None):
            assert current_context() == {"scenario": "contrast_recovery", "cell": "contrast-1000_exact_seed-2"}
        assert current_context() == {"scenario": "contrast_recovery"}
    with pytest.raises(ValueError):
        with cell_context(iteration=3):
            pass


def test_cell_context_is_per_thread() -> None:
    seen: list[dict[str, object]] = []
    with cell_context(cell="main-cell"):
        worker = threading.Thread(target=lambda: seen.append(current_context()))
        worker.start()
        worker.join()
    assert seen == [{}]


def test_structured_logs_flag(monkeypatch) -> None:
    monkeypatch.setenv("POLYCT_STRUCTURED_LOGS", "yes")
    assert structured_logs_enabled()
    monkeypatch.setenv("POLYCT_STRUCTURED_LOGS", "0")
    assert not structured_logs_enabled()


def test_setup_logging_writes_tagged_lines(monkeypatch, tmp_path) -> None:
    monkeypatch.setenv("POLYCT_STRUCTURED_LOGS", "1")
    root = logging.getLogger()
    saved = list(root.handlers), root.level
    for h in list(root.handlers):
        root.removeHandler(h)
    try:
        log_file = tmp_path / "logs" / "polyct.log"
        setup_logging(log_file=log_file, level=logging.DEBUG)
        handlers = [h for h in root.handlers if isinstance(h, logging.FileHandler)]
        assert len(handlers) == 1
        assert root.level == logging.DEBUG
        with cell_context(cell="n-500_exact_seed-1"):
            logging.getLogger("polyct").debug("hello")
        handlers[0].flush()
        lines = log_file.read_text(encoding="utf-8").splitlines()
        payload = json.loads(lines[-1])
        assert payload["message"] == "hello"
        assert payload["cell"] == "n-500_exact_seed-1"
    finally:
        for h in list(root.handlers):
            root.removeHandler(h)
            h.close()
        for h in saved[0]:
            root.addHandler(h)
        root.setLevel(saved[1])
