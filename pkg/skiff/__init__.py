"""
Misc. package-level utilities: version, timing decorator, logging setup and the error hierarchy.

---------------
Skiff HPC container launcher
Copyright (C) 2026 The Skiff Developers, all rights reserved.
You may use, distribute, and modify this code under the terms of the MIT License.
"""

import os
import time
import logging
import functools
from logging.handlers import RotatingFileHandler

log = logging.getLogger(__name__)


__version__ = '0.3.0'

LOG_MAX_FILESIZE_MB = 2
LOG_BACKUP_COUNT = 9
LOG_FMT = '%(asctime)s\t%(levelname)s\t%(message)s'


def print_timing(func):
    """Debug decorator for logging the time in milliseconds a function takes to execute"""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        t1 = time.perf_counter()
        res = func(*args, **kwargs)
        t2 = time.perf_counter()
        log.debug('%06.1f ms %s', (t2-t1)*1000.0, func.__name__)
        return res
    return wrapper


def configure_logging(logfilename=None, level=logging.WARNING):
    """Configure application-level console and (optionally) file-based logging"""

    # configure console logging...
    logging.basicConfig(level=level, format=LOG_FMT)
    logging.getLogger().setLevel(level)

    if not logfilename:
        return

    # configure file-based logging, replacing an earlier log file
    logfilename = os.path.expanduser(logfilename)
    root = logging.getLogger()
    for handler in [h for h in root.handlers if isinstance(h, RotatingFileHandler)]:
        root.removeHandler(handler)
        handler.close()
    try:
        os.makedirs(os.path.dirname(logfilename) or '.', exist_ok=True)
        file_logger = RotatingFileHandler(logfilename, maxBytes=LOG_MAX_FILESIZE_MB*1024*1024, backupCount=LOG_BACKUP_COUNT)
        file_logger.setFormatter(logging.Formatter(LOG_FMT))
        file_logger.setLevel(level)
        root.addHandler(file_logger)
    except Exception:
        log.exception('Failed while configuring logging!')


class SkiffError(Exception):
    """Base class for every error skiff raises on purpose"""
    exit_code = 1


class ValidationError(SkiffError):
    """Input document could not be parsed or failed validation"""
    exit_code = 2


class StoreError(SkiffError):
    """Shared or local image store refused an operation"""
    exit_code = 3


class SimulationError(SkiffError):
    """Simulated job step did not complete"""
    exit_code = 4
