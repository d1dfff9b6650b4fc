"""Loguru sink configuration used by the command line.

Library modules only call ``logger``; sinks are installed here, never at import time.
"""
import sys

from loguru import logger

NEW_FORMAT = (
    "<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | "
    "<cyan>{name}</cyan>:<cyan>{function}</cyan>:<cyan>{line}</cyan>"
    "- <level>{message}</level>"
)


def level_for(verbose: int, quiet: bool = False) -> str:
    if quiet:
        return "WARNING"
    return "DEBUG" if verbose else "INFO"


def configure_logging(level: str = "INFO", sink=None):
    """Replace every loguru handler with a single one on ``sink`` (stderr by default)

    stdout is left alone so command output stays machine readable.
    """
    logger.remove()
    logger.configure(
        handlers=[dict(sink=sink or sys.stderr, format=NEW_FORMAT, diagnose=False, level=level)]
    )
    logger.enable("vexir")
