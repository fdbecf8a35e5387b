"""
Logging setup - verbosity comes from SCGA_LOG_LEVEL
"""
import logging
import os

LOG_LEVEL_ENV = "SCGA_LOG_LEVEL"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: str = None) -> int:
    """Configure the root logger once and return the numeric level in effect"""
    name = (level or os.getenv(LOG_LEVEL_ENV) or "WARNING").upper()
    numeric = logging.getLevelName(name)
    if not isinstance(numeric, int):
        numeric = logging.WARNING
    logging.basicConfig(level=numeric, format=LOG_FORMAT, force=True)
    return numeric
