"""
Logger Utility Module
Sets up loguru sinks and routes stdlib logging (Flask, werkzeug) through them
"""

import functools
import logging
import os
import sys
import time
from typing import Optional

from loguru import logger

from config.settings import Config


class InterceptHandler(logging.Handler):
    """Forward stdlib logging records to loguru"""

    def emit(self, record):
        try:
            level = logger.level(record.levelname).name
        except ValueError:
            level = record.levelno

        frame, depth = logging.currentframe(), 2
        while frame and frame.f_code.co_filename == logging.__file__:
            frame = frame.f_back
            depth += 1

        logger.opt(depth=depth, exception=record.exc_info).log(level, record.getMessage())


def setup_logger(log_level: Optional[str] = None, log_file: Optional[str] = None, console: bool = True):
    """Setup logging configuration for the service, trainer and CLI"""
    # Remove default loguru handler
    logger.remove()

    config = Config()
    log_level = log_level or config.LOG_LEVEL
    log_file = log_file or config.LOG_FILE

    os.makedirs(os.path.dirname(log_file) or '.', exist_ok=True)

    if console:
        # Console goes to stderr so CLI stdout stays machine-readable
        logger.add(
            sys.stderr,
            format="<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | <cyan>{name}</cyan>:<cyan>{function}</cyan>:<cyan>{line}</cyan> - <level>{message}</level>",
            level=log_level,
            colorize=True
        )

    logger.add(
        log_file,
        format="{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {name}:{function}:{line} - {message}",
        level=log_level,
        rotation="10 MB",
        retention="30 days",
        compression="zip"
    )

    error_log_file = log_file.replace('.log', '_errors.log')
    logger.add(
        error_log_file,
        format="{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {name}:{function}:{line} - {message}",
        level="ERROR",
        rotation="5 MB",
        retention="90 days",
        compression="zip"
    )

    logging.basicConfig(handlers=[InterceptHandler()], level=0, force=True)
    for name in list(logging.root.manager.loggerDict.keys()):
        logging.getLogger(name).handlers = []
        logging.getLogger(name).propagate = True

    logger.info(f"Logging initialized (level={log_level}, file={log_file})")


def get_logger(name: str = None):
    """Get a logger instance bound to a component name"""
    if name:
        return logger.bind(component=name)
    return logger


def log_performance(func):
    """Decorator to log function wall time at DEBUG"""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        start_time = time.perf_counter()
        try:
            result = func(*args, **kwargs)
        except Exception as e:
            duration = time.perf_counter() - start_time
            logger.error(f"{func.__qualname__} failed after {duration:.4f} seconds: {e}")
            raise
        duration = time.perf_counter() - start_time
        logger.debug(f"{func.__qualname__} completed in {duration:.4f} seconds")
        return result
    return wrapper
