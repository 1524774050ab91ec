"""
Shared extensions
Initialize process-wide singletons here
"""
import logging
import sys

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'

# Package logger, configured once by the CLI
logger = logging.getLogger('milnce')


def configure_logging(level='INFO'):
    """Attach a stderr handler to the package logger (idempotent)"""
    if isinstance(level, str):
        level = getattr(logging, level.upper(), logging.INFO)
    logger.setLevel(level)
    ours = [h for h in logger.handlers if getattr(h, '_milnce', False)]
    if ours:
        # follow a swapped sys.stderr (test runners replace it per invocation)
        ours[0].setStream(sys.stderr)
    else:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handler._milnce = True
        logger.addHandler(handler)
    logger.propagate = False
    return logger
