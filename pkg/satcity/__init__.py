import logging
import sys

__version__ = "0.3.0"

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

logger = logging.getLogger(__name__)


def configure_logging(level="INFO", log_file=None):
    """
    Configure package logging.

    Logs always go to stderr; data products only ever go to files.

    Args:
        level: Logging level name or number
        log_file: Optional path of a log file opened in append mode
    """
    handlers = [logging.StreamHandler(sys.stderr)]
    if log_file:
        handlers.append(logging.FileHandler(log_file, mode='a'))

    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)

    logging.basicConfig(level=level, format=LOG_FORMAT, handlers=handlers)
    logger.debug(f"Logging configured at level {level}")
