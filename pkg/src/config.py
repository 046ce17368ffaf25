# src/config.py
import os
from dotenv import load_dotenv
from pathlib import Path

from .utils.errors import ConfigError

# Load .env from project root
ROOT_DIR = Path(__file__).resolve().parents[1]
ENV_PATH = ROOT_DIR / ".env"
load_dotenv(ENV_PATH)

LOG_LEVELS = ("TRACE", "DEBUG", "INFO", "SUCCESS", "WARNING", "ERROR", "CRITICAL")


class Config:
    TREELABEL_LOG: str = os.getenv("TREELABEL_LOG", "INFO").upper()
    TREELABEL_LOG_DIR: str = os.getenv("TREELABEL_LOG_DIR", str(ROOT_DIR / "logs"))
    TREELABEL_THREADS: str = os.getenv("TREELABEL_THREADS", "0")

    @classmethod
    def threads(cls) -> int:
        """0 means all cores."""
        return int(cls.TREELABEL_THREADS)

    @classmethod
    def validate(cls) -> None:
        bad = []
        if cls.TREELABEL_LOG not in LOG_LEVELS:
            bad.append(f"TREELABEL_LOG={cls.TREELABEL_LOG}")
        if not cls.TREELABEL_THREADS.isdigit():
            bad.append(f"TREELABEL_THREADS={cls.TREELABEL_THREADS}")

        if bad:
            raise ConfigError(
                f"Invalid environment variables: {', '.join(bad)}. "
                f"Check your .env file."
            )
