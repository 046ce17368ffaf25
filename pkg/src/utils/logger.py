# src/utils/logger.py
import sys
from pathlib import Path

from loguru import logger

from src.config import Config

LOG_DIR = Path(Config.TREELABEL_LOG_DIR)
LOG_DIR.mkdir(parents=True, exist_ok=True)

LOG_FILE = LOG_DIR / "treelabel.log"

_LEVEL = Config.TREELABEL_LOG if Config.TREELABEL_LOG else "INFO"

# Configure loguru
logger.remove()
logger.add(sys.stderr, level=_LEVEL)
logger.add(
    LOG_FILE,
    level=_LEVEL,
    rotation="1 MB",
    retention="7 days",
    compression="zip",
    enqueue=True,
    backtrace=True,
    diagnose=True,
)

__all__ = ["logger"]
