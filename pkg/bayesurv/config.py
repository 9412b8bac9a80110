"""
Configuration: loads environment variables and validates settings.
"""
from __future__ import annotations

from functools import lru_cache

from dotenv import load_dotenv
from pydantic import field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

load_dotenv()


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="BAYESURV_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    # Logging
    log_level: str = "INFO"
    log_dir: str = "logs"

    # Sampler defaults
    chains: int = 4
    warmup: int = 1000
    iters: int = 1000
    seed: int = 12345
    target_accept: float = 0.95
    max_treedepth: int = 10
    n_jobs: int = 1
    init_radius: float = 2.0
    init_attempts: int = 100

    # Likelihood / prediction defaults
    qnodes: int = 15
    grid_size: int = 100
    credible_level: float = 0.95

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        allowed = {"DEBUG", "INFO", "WARNING", "ERROR"}
        v = v.upper()
        if v not in allowed:
            raise ValueError(f"log_level must be one of {allowed}")
        return v

    @field_validator("target_accept", "credible_level")
    @classmethod
    def validate_unit_interval(cls, v: float) -> float:
        if not 0.0 < v < 1.0:
            raise ValueError("must lie strictly between 0 and 1")
        return v


@lru_cache()
def get_settings() -> Settings:
    return Settings()


settings = get_settings()
