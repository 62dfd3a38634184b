import logging
import sys
import os
from logging.handlers import RotatingFileHandler

# Centralized Constants
LOG_FILE = os.environ.get("MASKLAB_LOG_FILE", "masklab.log")
MAX_LOG_SIZE = 5 * 1024 * 1024  # 5 MB
BACKUP_COUNT = 3  # Keep 3 old logs (masklab.log.1, .2, .3)
DEFAULT_LEVEL = os.environ.get("MASKLAB_LOG_LEVEL", "INFO").upper()

def get_logger(name="MaskLab"):
    """
    Configures and returns a singleton logger instance.
    Ensures handlers are only added once so repeated imports (tests, Streamlit reruns)
    do not duplicate output.
    """
    logger = logging.getLogger(name)

    # Only configure if handlers don't already exist
    if not logger.handlers:
        logger.setLevel(DEFAULT_LEVEL)
        logger.propagate = False

        # Formatter: Timestamp | Level | Source Module | Message
        formatter = logging.Formatter('%(asctime)s | %(levelname)-8s | %(module)s | %(message)s')

        # 1. Rotating File Handler: Manages disk space automatically
        try:
            file_handler = RotatingFileHandler(
                LOG_FILE,
                maxBytes=MAX_LOG_SIZE,
                backupCount=BACKUP_COUNT
            )
            file_handler.setFormatter(formatter)
            logger.addHandler(file_handler)
        except OSError as e:
            # Read-only or inaccessible working directory: console only
            print(f"Critical Error: Could not initialize FileHandler: {e}", file=sys.stderr)

        # 2. Console Handler: stderr keeps CLI stdout clean for machine-readable output
        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setFormatter(formatter)
        logger.addHandler(console_handler)

        logger.debug("--- MaskLab Logger Initialized ---")

    return logger

# Create the singleton instance to be imported by all other modules
log = get_logger()
