"""
Logging setup for CLI runs and sweeps.

Sweep cells run on worker threads. Inside ``cell_context`` every record carries the scenario, cell,
solver and seed, so interleaved lines from concurrent cells can be told apart. Structured output
(one JSON object per line) is switched on with POLYCT_STRUCTURED_LOGS.
"""

from __future__ import annotations

import json
import logging
import os
from collections.abc import Iterator
from contextlib import contextmanager
from contextvars import ContextVar
from pathlib import Path
from typing import Any

STRUCTURED_ENV = "POLYCT_STRUCTURED_LOGS"
CONTEXT_FIELDS = ("scenario", "cell", "solver", "seed")
PLAIN_FORMAT = "%(asctime)s - %(levelname)s - %(cell_tag)s%(message)s"

_context: ContextVar[dict[str, Any] | None] = ContextVar("polyct_log_context", default=None)


def current_context() -> dict[str, Any]:
    return dict(_context.get() or {})


@contextmanager
def cell_context(**fields: Any) -> Iterator[None]:
    """Attach run fields (None values are skipped) to records logged in this block and this thread."""
    unknown = set(fields) - set(CONTEXT_FIELDS)
    if unknown:
        raise ValueError(f"unknown log context fields: {sorted(unknown)}")
    merged = {**current_context(), **{k: v for k, v in fields.items() if v is not None}}
    token = _context.set(merged)
    try:
        yield
    finally:
        _context.reset(token)


class CellContextFilter(logging.Filter):
    def filter(self, record: logging.LogRecord) -> bool:
        ctx = current_context()
        tag = f"[{ctx['cell']}] " if "cell" in ctx else ""
        record.__dict__.update(polyct_context=ctx, cell_tag=tag)
        return True


class StructuredLogFormatter(logging.Formatter):
    """One JSON object per line: time, level, logger, message, the cell fields, and any traceback."""

    def format(self, record: logging.LogRecord) -> str:
        try:
            message = record.getMessage()
        except Exception as exc:
            message = f"<message unavailable: {exc!s}>"
        payload: dict[str, Any] = {
            "timestamp": self.formatTime(record, self.datefmt),
            "level": record.levelname,
            "logger": record.name,
            "message": message,
        }
        ctx = getattr(record, "polyct_context", None)
        if ctx is None:
            ctx = current_context()
        for key in CONTEXT_FIELDS:
            if key in ctx:
                payload[key] = ctx[key]
        if record.exc_info:
            payload["exception"] = self.formatException(record.exc_info)
        return json.dumps(payload, ensure_ascii=False, default=str)


def structured_logs_enabled() -> bool:
    return os.environ.get(STRUCTURED_ENV, "").strip().lower() in ("1", "true", "yes")


def _make_formatter() -> logging.Formatter:
    if structured_logs_enabled():
        return StructuredLogFormatter()
    return logging.Formatter(PLAIN_FORMAT)


def _attach(root: logging.Logger, handler: logging.Handler, level: int) -> None:
    handler.setLevel(level)
    handler.setFormatter(_make_formatter())
    handler.addFilter(CellContextFilter())
    root.addHandler(handler)


def setup_logging(*, log_file: str | Path = "polyct.log", level: int = logging.INFO) -> None:
    """Console plus file handler on the root logger; handlers already present are kept."""
    root = logging.getLogger()
    root.setLevel(level)

    if not any(type(h) is logging.StreamHandler for h in root.handlers):
        _attach(root, logging.StreamHandler(), level)

    if not any(isinstance(h, logging.FileHandler) for h in root.handlers):
        log_path = Path(log_file)
        try:
            log_path.parent.mkdir(parents=True, exist_ok=True)
            _attach(root, logging.FileHandler(str(log_path), encoding="utf-8"), level)
        except OSError:
            root.debug("Could not create file handler for %s", log_path)
