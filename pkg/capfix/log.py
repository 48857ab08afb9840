"""Logging setup used by the command-line entry point."""
import logging
import sys

LOG_FORMAT = '%(asctime)s [%(levelname)s] %(message)s'


def configure_logging(level="INFO", log_file=None):
    """
    Route log records to stderr and, optionally, to a log file.
    stdout is left alone because commands print their JSON results there.
    """
    handlers = [logging.StreamHandler(sys.stderr)]
    if log_file:
        file_handler = logging.FileHandler(log_file, encoding="utf-8")
        handlers.append(file_handler)
    for handler in handlers:
        handler.setFormatter(logging.Formatter(LOG_FORMAT))

    logging.basicConfig(level=level.upper(), handlers=handlers, force=True)
    return logging.getLogger("capfix")
