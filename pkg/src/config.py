# ==========================================
# config.py
# Centralized runtime configuration (output root, threads, log level)
# ==========================================

import os
from typing import Optional

from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


class RuntimeConfig:
    """Process-wide settings read from the environment."""

    def __init__(self):
        """Initialize from TURNPIKE_* environment variables."""
        self.output_root = os.getenv("TURNPIKE_OUTPUT_ROOT") or "runs"

        threads = os.getenv("TURNPIKE_THREADS")
        self.threads: Optional[int] = int(threads) if threads and threads.isdigit() and int(threads) > 0 else None

        level = (os.getenv("TURNPIKE_LOG_LEVEL") or "INFO").upper()
        self.log_level = level if level in LOG_LEVELS else "INFO"

    def as_dict(self) -> dict:
        return {"output_root": self.output_root, "threads": self.threads, "log_level": self.log_level}


# Global instance for easy importing
runtime_config = RuntimeConfig()


def get_runtime_config() -> RuntimeConfig:
    """
    Get the runtime configuration.

    Returns:
        RuntimeConfig: settings loaded from the environment / .env

    Example:
        from src.config import get_runtime_config

        cfg = get_runtime_config()
        print(cfg.output_root)
    """
    return runtime_config


if __name__ == "__main__":
    print(f"Runtime configuration: {runtime_config.as_dict()}")
