#!/usr/bin/env python3
"""
Logging configuration for the EOQ exemptable-cost toolkit
"""

import logging
import os
import sys
from typing import Optional

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'


def setup_logger(name: str, level: Optional[str] = None) -> logging.Logger:
    """
    Set up a logger with consistent formatting.

    Reports go to stdout, so log records are always written to stderr.

    Args:
        name: Logger name (usually __name__)
        level: Logging level (DEBUG, INFO, WARNING, ERROR); falls back to
            the LOG_LEVEL environment variable, then INFO

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger(name)

    # Only configure if not already configured
    if not logger.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT))
        logger.addHandler(handler)
        logger.propagate = False

    if level is None:
        level = os.environ.get('LOG_LEVEL', 'INFO')
    logger.setLevel(getattr(logging, str(level).upper(), logging.INFO))

    return logger


def set_global_level(level: str) -> None:
    """Apply a level to every logger created through setup_logger (CLI --log-level)."""
    log_level = getattr(logging, str(level).upper(), logging.INFO)
    for logger in logging.Logger.manager.loggerDict.values():
        if isinstance(logger, logging.Logger) and logger.name.startswith(('eoq_', '__main__')):
            logger.setLevel(log_level)
