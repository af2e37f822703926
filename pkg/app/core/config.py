import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from functools import lru_cache
from pathlib import Path
from typing import Optional

from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.core.errors import ConfigError
from app.schemas.schemas import ExperimentConfig


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="TREEFED_", env_file=".env", extra="ignore")

    log: str = "INFO"
    output_dir: Path = Path("runs")
    checkpoint_dir: Optional[Path] = None
    host: str = "127.0.0.1"
    port: int = 8000
    slow_round_seconds: float = 30.0
    new_relic_license_key: str = ""
    new_relic_app_name: str = "TreeFed-Simulator"
    new_relic_config_file: Optional[Path] = Path("newrelic.ini")


@lru_cache()
def get_settings():
    return Settings()


def configure_logging(level: Optional[str] = None) -> None:
    logging.basicConfig(
        level=(level or get_settings().log).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def load_experiment_config(path: Path, seed: Optional[int] = None) -> ExperimentConfig:
    """
    Read a flat dotted-key config file, e.g.

        seed = 3
        fusion.epsilon0 = 0.8
        data.domains.A.brightness_shift = 0.1
    """
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except (OSError, UnicodeDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if seed is not None:
        raw["seed"] = seed
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid config {path}:\n{exc}") from exc
