"""Diagnostic logging through rich."""

import logging

from rich.console import Console
from rich.logging import RichHandler

LOGGER_NAME = "joker"


def configure_logging(level: str = "WARNING") -> logging.Logger:
    """Attach a single RichHandler (stderr) to the package logger."""
    logger = logging.getLogger(LOGGER_NAME)
    for handler in list(logger.handlers):
        if isinstance(handler, RichHandler):
            logger.removeHandler(handler)
    handler = RichHandler(
        console=Console(stderr=True),
        show_path=False,
        rich_tracebacks=False,
    )
    handler.setFormatter(logging.Formatter("%(message)s"))
    logger.addHandler(handler)
    logger.setLevel(getattr(logging, level, logging.WARNING))
    return logger
