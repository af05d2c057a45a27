import logging

from rich.console import Console
from rich.logging import RichHandler

LOGGER_NAME = "implicitce"

_handler: RichHandler | None = None


def setup_logging(level: str = "INFO") -> logging.Logger:
    global _handler
    logger = logging.getLogger(LOGGER_NAME)
    if _handler is None:
        _handler = RichHandler(
            console=Console(stderr=True),
            show_path=False,
            rich_tracebacks=True,
            log_time_format="[%X]",
        )
        _handler.setFormatter(logging.Formatter("%(message)s"))
        logger.addHandler(_handler)
        logger.propagate = True
    logger.setLevel(level.upper())
    return logger
