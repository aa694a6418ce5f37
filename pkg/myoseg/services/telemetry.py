"""Structured logging setup for commands and services."""

from __future__ import annotations

import logging
import sys
from typing import List

import structlog


def _processors(json_logs: bool) -> List[structlog.types.Processor]:
    renderer = (
        structlog.processors.JSONRenderer(sort_keys=True)
        if json_logs
        else structlog.dev.ConsoleRenderer(colors=False)
    )
    return [
        structlog.stdlib.filter_by_level,
        structlog.stdlib.add_logger_name,
        structlog.stdlib.add_log_level,
        structlog.processors.TimeStamper(fmt="iso"),
        structlog.processors.StackInfoRenderer(),
        structlog.processors.format_exc_info,
        structlog.processors.UnicodeDecoder(),
        renderer,
    ]


def _apply(json_logs: bool) -> None:
    structlog.configure(
        processors=_processors(json_logs),
        context_class=dict,
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=False,
    )


# Library default: structlog events flow into stdlib logging, whose handlers
# are left to the host application.
_apply(json_logs=False)


HANDLER_NAME = "myoseg.stderr"


def reset_logging() -> None:
    """Detach the handler installed by :func:`configure_logging`."""
    root = logging.getLogger()
    for handler in list(root.handlers):
        if handler.get_name() == HANDLER_NAME:
            root.removeHandler(handler)
            handler.close()


def configure_logging(level: str = "INFO", json_logs: bool = False) -> None:
    """Send all log output to the current standard error at the given level."""
    reset_logging()
    handler = logging.StreamHandler(sys.stderr)
    handler.set_name(HANDLER_NAME)
    handler.setFormatter(logging.Formatter("%(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    root.setLevel(level.upper())
    _apply(json_logs)


def get_logger(name: str) -> structlog.stdlib.BoundLogger:
    return structlog.get_logger(name)
