# logger.py

import logging
import sys
import time
from contextlib import contextmanager
from typing import Iterator, Optional

# 1. Configure the logger
logger = logging.getLogger("forgekit")
logger.setLevel(logging.INFO)

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'


def configure_logging(level: str = "INFO", log_file: Optional[str] = None) -> None:
    """
    Attach handlers to the forgekit logger.

    Logs go to stderr, and additionally to ``log_file`` when one is given.
    Calling this again replaces the previously installed handlers.
    """
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()

    formatter = logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT)
    stream_handler = logging.StreamHandler(sys.stderr)
    stream_handler.setFormatter(formatter)
    logger.addHandler(stream_handler)

    if log_file:
        file_handler = logging.FileHandler(log_file)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    logger.setLevel(level.upper())


# 2. Timing helper for commands and long-running phases
@contextmanager
def log_duration(label: str) -> Iterator[None]:
    """
    Log how long the wrapped block took.
    """
    start_time = time.time()
    try:
        yield
    finally:
        process_time = (time.time() - start_time) * 1000
        formatted_process_time = f'{process_time:.2f}'
        logger.info(f"{label} | Duration: {formatted_process_time}ms")
