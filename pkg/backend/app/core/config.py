"""
Application configuration.

Process-level settings come from the environment (and ``.env``) through
pydantic-settings; engine behaviour comes from a YAML file whose blocks map
one-to-one onto the models below.
"""

from functools import lru_cache
from pathlib import Path
from typing import Literal

import yaml
from app.core.errors import ConfigError
from app.models.scheduling import DecaySpec
from app.models.tools import DEFAULT_PROFILES, EnvProfile
from pydantic import BaseModel, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Application settings loaded from environment variables."""

    model_config = SettingsConfigDict(
        # Project root first, then backend/, then the current directory
        env_file=("../.env", ".env"),
        env_file_encoding="utf-8",
        extra="ignore",
    )

    # Application
    app_name: str = "AgentFlow Program Scheduler"
    app_env: str = "development"
    app_debug: bool = Field(default=False, alias="APP_DEBUG")
    log_level: str = "INFO"

    # Server
    host: str = "0.0.0.0"
    port: int = 8000  # PORT from the platform wins, see run.py

    # Engine
    engine_config_path: str | None = None


@lru_cache
def get_settings() -> Settings:
    """Get cached settings instance."""
    return Settings()


class SchedulerConfig(BaseModel):
    """Monitor interval, hysteresis watermarks, decay and prefill chunk."""

    delta_t: int = 5
    lambda_max: float = 1.0
    lambda_min: float = 1.0
    decay: DecaySpec = Field(default_factory=DecaySpec.geometric)
    chunk: int = 512
    per_step_guard: bool = False
    # Queue positions whose environments start preparing early; None = 2 x backends
    prep_lookahead: int | None = None

    @model_validator(mode="after")
    def _check_ranges(self) -> "SchedulerConfig":
        if self.delta_t < 1:
            raise ConfigError("delta_t must be >= 1", delta_t=self.delta_t)
        if not 0 < self.lambda_min <= self.lambda_max <= 1:
            raise ConfigError(
                "watermarks must satisfy 0 < lambda_min <= lambda_max <= 1",
                lambda_min=self.lambda_min,
                lambda_max=self.lambda_max,
            )
        if self.chunk < 1:
            raise ConfigError("chunk must be >= 1", chunk=self.chunk)
        if self.prep_lookahead is not None and self.prep_lookahead < 0:
            raise ConfigError("prep_lookahead must be >= 0")
        return self


class ClusterConfig(BaseModel):
    backends: int = 2
    capacity_tokens: int = 65536

    @model_validator(mode="after")
    def _check_cluster(self) -> "ClusterConfig":
        if self.backends < 1:
            raise ConfigError("at least one backend is required")
        if self.capacity_tokens < 1:
            raise ConfigError("capacity_tokens must be positive")
        return self


class PoolConfig(BaseModel):
    disk_capacity: int = 4096
    port_start: int = 30000
    port_count: int = 1024

    @model_validator(mode="after")
    def _check_pools(self) -> "PoolConfig":
        if self.disk_capacity < 0 or self.port_count < 0:
            raise ConfigError("pool sizes must be nonnegative")
        return self


class ToolsConfig(BaseModel):
    hooks_enabled: bool = True
    async_prep: bool = True
    profiles: dict[str, EnvProfile] = Field(
        default_factory=lambda: dict(DEFAULT_PROFILES)
    )


class BaselineConfig(BaseModel):
    """Knobs of the comparison policies."""

    ttl_predictor: Literal["constant", "lagged_mean"] = "constant"
    ttl_ticks: int = 30
    ttl_window: int = 3


class SimulationConfig(BaseModel):
    ticks_per_minute: int = 60
    report_interval: int = 60
    max_ticks: int = 500_000
    log_decode_tokens: bool = False


class GatewayBackend(BaseModel):
    url: str
    capacity_tokens: int = 65536


class GatewayConfig(BaseModel):
    backends: list[GatewayBackend] = Field(
        default_factory=lambda: [
            GatewayBackend(url="sim://backend-0"),
            GatewayBackend(url="sim://backend-1"),
        ]
    )
    tick_interval_seconds: float = 0.05
    park_timeout_seconds: float = 30.0
    default_profile: str = "mini-swe"
    completion_tokens: int = 32
    request_timeout_seconds: float = 60.0


class EngineConfig(BaseModel):
    """The structured engine configuration file."""

    scheduler: SchedulerConfig = Field(default_factory=SchedulerConfig)
    cluster: ClusterConfig = Field(default_factory=ClusterConfig)
    pools: PoolConfig = Field(default_factory=PoolConfig)
    tools: ToolsConfig = Field(default_factory=ToolsConfig)
    baselines: BaselineConfig = Field(default_factory=BaselineConfig)
    simulation: SimulationConfig = Field(default_factory=SimulationConfig)
    gateway: GatewayConfig = Field(default_factory=GatewayConfig)

    @property
    def prep_lookahead(self) -> int:
        if self.scheduler.prep_lookahead is not None:
            return self.scheduler.prep_lookahead
        return 2 * self.cluster.backends


def load_engine_config(path: str | Path | None = None) -> EngineConfig:
    """
    Load the engine configuration from YAML.

    Args:
        path: Config file; ``None`` returns the defaults.

    Returns:
        Validated EngineConfig.
    """
    if path is None:
        return EngineConfig()

    config_path = Path(path)
    if not config_path.is_file():
        raise ConfigError(f"engine config not found: {config_path}")

    try:
        raw = yaml.safe_load(config_path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML in {config_path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{config_path} must contain a mapping")

    try:
        return EngineConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"invalid engine config {config_path}: {e}") from e


@lru_cache
def get_engine_config() -> EngineConfig:
    """Get the cached engine config named by the settings."""
    return load_engine_config(get_settings().engine_config_path)
