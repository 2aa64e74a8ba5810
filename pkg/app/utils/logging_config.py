"""
Structured Logging Configuration

Console (stderr) and optional rotating-file logging in text or JSON form.
stdout is left to command results such as `qdiff metrics`.

Records emitted while a pipeline stage runs carry the stage context (stage
name, grid size) through `stage_context`, so JSON logs of a sweep can be
filtered per stage.

Environment variables (a .env file is honoured):
- LOG_LEVEL: DEBUG, INFO, WARNING, ERROR or CRITICAL
- LOG_FORMAT: json or text
- LOG_FILE: Path to a log file (never inside an output directory's manifest)
- LOG_MAX_BYTES: Rotation size (default: 10MB)
- LOG_BACKUP_COUNT: Rotated files kept (default: 5)
"""

import contextlib
import contextvars
import json
import logging
import os
import sys
from datetime import datetime, timezone
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Any, Dict, Iterator

# Fields attached to every record emitted inside stage_context
_CONTEXT: contextvars.ContextVar[Dict[str, Any]] = contextvars.ContextVar(
    "qdiff_log_context", default={}
)

# Library loggers that are only useful when debugging them directly
QUIET_LOGGERS = ("numba",)


class ContextFilter(logging.Filter):
    """Copies the active stage context onto each record as `extra_fields`."""

    def filter(self, record: logging.LogRecord) -> bool:
        context = _CONTEXT.get()
        if context:
            merged = dict(context)
            merged.update(getattr(record, "extra_fields", {}))
            record.extra_fields = merged
        return True


@contextlib.contextmanager
def stage_context(**fields: Any) -> Iterator[None]:
    """
    Attach fields (stage name, grid size, ...) to every record logged inside
    the block. Nested blocks extend the outer context.
    """
    token = _CONTEXT.set({**_CONTEXT.get(), **fields})
    try:
        yield
    finally:
        _CONTEXT.reset(token)


class JSONFormatter(logging.Formatter):
    """
    One JSON object per record: timestamp, level, logger, message, source
    location, exception text and any `extra_fields`.
    """

    def format(self, record: logging.LogRecord) -> str:
        log_data: Dict[str, Any] = {
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
            **getattr(record, "extra_fields", {}),
            "location": f"{record.module}.{record.funcName}:{record.lineno}",
        }
        if record.exc_info:
            log_data["exception"] = self.formatException(record.exc_info)
        return json.dumps(log_data, default=str)


class TextFormatter(logging.Formatter):
    """
    Human-readable lines: `timestamp - name - level - [stage] message`.

    The bracketed stage only appears inside stage_context.
    """

    def __init__(self):
        super().__init__(
            fmt="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
            datefmt="%Y-%m-%d %H:%M:%S",
        )

    def formatMessage(self, record: logging.LogRecord) -> str:
        line = super().formatMessage(record)
        stage = getattr(record, "extra_fields", {}).get("stage")
        if stage is None:
            return line
        head, sep, message = line.partition(f" - {record.levelname} - ")
        return f"{head}{sep}[{stage}] {message}"


def _handler(handler: logging.Handler, formatter: logging.Formatter, level: int):
    handler.setLevel(level)
    handler.setFormatter(formatter)
    handler.addFilter(ContextFilter())
    return handler


def setup_logging(
    log_level: str = "INFO",
    log_format: str = "text",
    log_file: str | None = None,
    max_bytes: int = 10 * 1024 * 1024,
    backup_count: int = 5,
) -> None:
    """
    Replace the root handlers with a stderr handler and an optional rotating file.

    Args:
        log_level: Logging level name; unknown names fall back to INFO
        log_format: json or text
        log_file: Optional log file path (parent directories are created)
        max_bytes: File size that triggers rotation
        backup_count: Rotated files kept
    """
    level = getattr(logging, log_level.upper(), logging.INFO)
    formatter = JSONFormatter() if log_format.lower() == "json" else TextFormatter()

    root_logger = logging.getLogger()
    root_logger.setLevel(level)
    root_logger.handlers.clear()
    root_logger.addHandler(_handler(logging.StreamHandler(sys.stderr), formatter, level))

    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        rotating = RotatingFileHandler(log_file, maxBytes=max_bytes, backupCount=backup_count)
        root_logger.addHandler(_handler(rotating, formatter, level))

    for name in QUIET_LOGGERS:
        logging.getLogger(name).setLevel(max(level, logging.WARNING))

    root_logger.debug(
        f"Logging configured: level={log_level}, format={log_format}, file={log_file}"
    )


def get_logging_config_from_env() -> Dict[str, Any]:
    """
    Logging settings from the environment.

    Returns:
        Keyword arguments for setup_logging
    """
    return {
        "log_level": os.getenv("LOG_LEVEL", "INFO"),
        "log_format": os.getenv("LOG_FORMAT", "text"),
        "log_file": os.getenv("LOG_FILE"),
        "max_bytes": int(os.getenv("LOG_MAX_BYTES", str(10 * 1024 * 1024))),
        "backup_count": int(os.getenv("LOG_BACKUP_COUNT", "5")),
    }


def configure_logging_from_env(log_level: str | None = None) -> None:
    """
    Configure logging from the environment.

    Args:
        log_level: Override for LOG_LEVEL (`--verbose` passes DEBUG)
    """
    config = get_logging_config_from_env()
    if log_level:
        config["log_level"] = log_level
    setup_logging(**config)
