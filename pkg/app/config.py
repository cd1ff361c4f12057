"""Application configuration using Pydantic Settings."""

from functools import lru_cache
from pathlib import Path

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Runtime settings loaded from MARKETDYN_* environment variables."""

    model_config = SettingsConfigDict(
        env_prefix="MARKETDYN_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    # Threshold cache directory (MARKETDYN_CACHE)
    cache: Path | None = None

    # Parallelism for calibration chunks and per-asset detection
    workers: int = 1

    # Logging
    log_level: str = "INFO"
    log_format: str = "json"

    # Longest segment simulated in phase-2 calibration. None calibrates every t up to
    # tmax; a shorter horizon repeats its last threshold, which under-alarms beyond it
    calibration_horizon: int | None = None

    # Paths
    @property
    def base_dir(self) -> Path:
        return Path(__file__).parent.parent

    @property
    def storage_dir(self) -> Path:
        return self.base_dir / "storage"

    @property
    def threshold_cache_dir(self) -> Path:
        if self.cache is not None:
            return Path(self.cache)
        return self.storage_dir / "threshold_cache"


@lru_cache
def get_settings() -> Settings:
    """Get cached settings instance."""
    return Settings()
