from pathlib import Path
from typing import Union

from dotenv import dotenv_values
from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.exceptions import ConfigError
from app.schemas import InversionConfig


class Settings(BaseSettings):
    """Process-wide settings read from the environment (prefix W2EIT_)"""
    model_config = SettingsConfigDict(env_prefix="W2EIT_", env_file=".env", extra="ignore")

    log_level: str = "INFO"
    mesh_refinement: int = 2
    workers: int = 1
    float_digits: int = 17
    prng: str = "PCG64"


settings = Settings()


def load_inversion_config(path: Union[str, Path], **overrides) -> InversionConfig:
    """
    Read a flat key=value file ('#' comments allowed) into an InversionConfig.

    Keys are case-insensitive. Keyword overrides that are not None replace
    file values before validation.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    raw = dotenv_values(path)
    values = {}
    for key, value in raw.items():
        if value is None:
            raise ConfigError(f"{path}: line for '{key}' has no value")
        values[key.strip().lower()] = value
    values.update({key: value for key, value in overrides.items() if value is not None})
    try:
        return InversionConfig.model_validate(values)
    except ValidationError as e:
        raise ConfigError(f"{path}: {e}") from e
