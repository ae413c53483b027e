"""
Ambient settings for the adversarial SDF toolkit.

These are process-level knobs (logging, threading, determinism). Everything
that changes a model or a result lives in the run configuration instead, so
that it is covered by the run digest.
"""

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """
    Application settings using Pydantic BaseSettings.

    Settings can be overridden via ``SDF_``-prefixed environment variables or
    a .env file.
    """

    model_config = SettingsConfigDict(
        env_file=".env", env_prefix="SDF_", case_sensitive=False, extra="ignore"
    )

    # Application Settings
    app_name: str = "Adversarial SDF Toolkit"
    app_version: str = "1.0.0"
    debug: bool = True

    # Logging Settings
    log_level: str = "INFO"
    log_file: str = "./logs/sdf.log"
    provenance_log: str = "./logs/provenance.log"

    # Numerics
    torch_threads: int = 1
    deterministic_algorithms: bool = True

    # Training progress bar
    progress_bar: bool = False


settings = Settings()
