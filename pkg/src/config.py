"""
Configuration management for the Markov LSA inference toolkit.
Handles environment variables and process-level settings.
"""

import logging
import os
from pathlib import Path

# Load environment variables
from dotenv import load_dotenv
# .env is outside the src folder(../)

load_dotenv(dotenv_path=Path(__file__).parent.parent / '.env')

class Config:
    """Process-level settings; experiment settings live in TOML files."""

    # Logging
    LOG_LEVEL: str = os.getenv("LSA_LOG_LEVEL", "INFO")

    # Worker pool
    THREADS: int = int(os.getenv("LSA_THREADS", "1"))
    BATCH_SIZE: int = int(os.getenv("LSA_BATCH_SIZE", "32"))

    # Provenance
    ARTIFACT_VERSION: str = os.getenv("LSA_ARTIFACT_VERSION", "1.0.0")

    # Directory paths
    BASE_DIR = Path(__file__).parent.parent
    OUTPUT_DIR = Path(os.getenv("LSA_OUTPUT_DIR", str(BASE_DIR / "output")))
    CONFIG_DIR = BASE_DIR / "configs"

    @classmethod
    def validate_config(cls) -> None:
        """Validate that the environment settings are usable."""
        if cls.THREADS < 1:
            raise ValueError("LSA_THREADS must be a positive integer")

        if cls.BATCH_SIZE < 1:
            raise ValueError("LSA_BATCH_SIZE must be a positive integer")

    @classmethod
    def log_level(cls) -> int:
        """Numeric logging level, falling back to INFO for unknown names."""
        level = logging.getLevelName(cls.LOG_LEVEL.upper())
        return level if isinstance(level, int) else logging.INFO

# Global config instance
config = Config()
