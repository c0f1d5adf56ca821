import logging
import sys

from pythonjsonlogger import jsonlogger

import local_env_variables.env_variables as env

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s %(message)s"
PACKAGE_LOGGERS = [
    "local_ntk_spectra",
    "local_kernel_training",
    "local_ntk_utils",
    "local_scripts",
]


def setup_logging(level: str | int | None = None, stream=None) -> logging.Logger:
    """attach a json handler to the package loggers. Library modules only call
    ``logging.getLogger(__name__)``; the command line calls this once.
    """
    if level is None:
        level = env.NTK_LOG_LEVEL
    if isinstance(level, str):
        level = level.upper()
    handler = logging.StreamHandler(sys.stderr if stream is None else stream)
    handler.setFormatter(jsonlogger.JsonFormatter(LOG_FORMAT))
    for name in PACKAGE_LOGGERS:
        logger = logging.getLogger(name)
        logger.handlers.clear()
        logger.addHandler(handler)
        logger.setLevel(level)
        logger.propagate = False
    return logging.getLogger("local_scripts")
