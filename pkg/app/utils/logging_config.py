"""Loguru logging configuration for the SDF toolkit."""
import os
import sys
from typing import Optional

from loguru import logger

from config.settings import settings


def setup_logging(log_level: Optional[str] = None):
    """Configure Loguru console, file and run-provenance sinks"""
    level = (log_level or settings.log_level).upper()

    # Remove default handler
    logger.remove()

    os.makedirs(os.path.dirname(settings.log_file) or ".", exist_ok=True)

    # Console logging (for development)
    if settings.debug:
        logger.add(
            sys.stderr,
            format=(
                "<green>{time:YYYY-MM-DD HH:mm:ss}</green> | "
                "<level>{level: <8}</level> | <cyan>{name}</cyan>:"
                "<cyan>{function}</cyan>:<cyan>{line}</cyan> - <level>{message}</level>"
            ),
            level=level,
            colorize=True,
        )

    logger.add(
        settings.log_file,
        format=(
            "{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | "
            "{name}:{function}:{line} - {message}"
        ),
        level=level,
        rotation="50 MB",
        retention="14 days",
        compression="zip",
        serialize=False,
        enqueue=True,  # Thread-safe logging
        backtrace=True,
        diagnose=False,
    )

    # Run provenance: digests and artifact paths of every command
    os.makedirs(os.path.dirname(settings.provenance_log) or ".", exist_ok=True)
    logger.add(
        settings.provenance_log,
        format="{time:YYYY-MM-DD HH:mm:ss} | RUN | {extra[command]} | {message}",
        level="INFO",
        rotation="10 MB",
        retention="90 days",
        filter=lambda record: "provenance" in record["extra"],
    )

    logger.debug("Logging configuration initialized")
