from functools import lru_cache
from pathlib import Path
from typing import Union

import yaml
from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.core.models.run_models import RunConfig
from app.shared.errors import ConfigError, StorageError


class Settings(BaseSettings):
    environment: str = "development"
    log_level: str = "INFO"
    log_dir: str = "logs"
    log_file: str = "dds.log"

    # Determinism holds per thread count
    num_threads: int = 1
    dtype: str = "float32"
    deterministic: bool = True

    model_config = SettingsConfigDict(env_file=".env", env_prefix="DDS_", extra="ignore")

    @property
    def effective_log_dir(self) -> str:
        """Tests never write into the shared log directory"""
        if self.environment == "test":
            return ""
        return self.log_dir


@lru_cache()
def get_settings():
    return Settings()


def load_run_config(path: Union[str, Path]) -> RunConfig:
    """Parse a YAML run configuration; unknown keys are rejected"""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise StorageError(f"cannot read config {path}: {e}") from e
    try:
        document = yaml.safe_load(text) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid config {path}: {e}") from e
    if not isinstance(document, dict):
        raise ConfigError(f"invalid config {path}: top level must be a mapping")
    return parse_run_config(document)


def parse_run_config(document: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigError(f"invalid config: {e}") from e


def dump_run_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False)


def save_run_config(config: RunConfig, path: Union[str, Path]) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dump_run_config(config), encoding="utf-8")
    except OSError as e:
        raise StorageError(f"cannot write config {path}: {e}") from e
