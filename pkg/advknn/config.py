import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

from pydantic import Field, ValidationError, model_validator
from pydantic_settings import BaseSettings

from advknn.core.exceptions import ConfigParseError
from advknn.models.run_models import RunConfig

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    # Process Configuration
    debug: bool = Field(default=False)
    log_level: str = Field(default="INFO")
    check_finite: Optional[bool] = Field(default=None)
    progress: bool = Field(default=True)

    # Numerics
    default_dtype: str = Field(default="float32", pattern="^float(32|64)$")
    knn_block_size: int = Field(default=256, ge=1)
    inference_batch_size: int = Field(default=512, ge=1)
    attack_chunk_size: int = Field(default=128, ge=1)

    # Locations
    data_dir: Path = Field(default=Path("data/mnist"))
    output_dir: Path = Field(default=Path("runs"))

    # Dataset mirrors
    mnist_url: str = Field(default="https://ossci-datasets.s3.amazonaws.com/mnist/")
    fashion_mnist_url: str = Field(default="http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/")
    request_timeout: int = Field(default=60, ge=1)

    class Config:
        env_file = ".env"
        env_prefix = "ADVKNN_"
        case_sensitive = False
        extra = "ignore"

    @model_validator(mode="after")
    def _default_finite_checks(self) -> "Settings":
        # NaN/Inf postconditions are always on in debug runs, opt-in otherwise
        if self.check_finite is None:
            self.check_finite = self.debug
        return self


settings = Settings()


def parse_config_file(path: Path) -> Tuple[Dict[str, str], Dict[str, int]]:
    """Read a flat ``key = value`` file; returns the values and the line of each key."""
    values: Dict[str, str] = {}
    lines: Dict[str, int] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigParseError(f"cannot read config file {path}: {e}", line=0) from e

    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigParseError(f"{path}:{number}: expected 'key = value', got {raw.strip()!r}", line=number)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigParseError(f"{path}:{number}: missing key", line=number)
        key = key.replace("-", "_")
        if key not in RunConfig.accepted_keys():
            raise ConfigParseError(f"{path}:{number}: unknown key {key!r}", line=number)
        if key in values:
            raise ConfigParseError(f"{path}:{number}: duplicate key {key!r} (first set on line {lines[key]})", line=number)
        values[key] = value
        lines[key] = number
    return values, lines


def load_run_config(path: Optional[Path] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Model defaults and process settings, then the config file, then explicit overrides (command-line flags)."""
    values: Dict[str, Any] = {"data_dir": settings.data_dir, "out": settings.output_dir}
    lines: Dict[str, int] = {}
    if path is not None:
        from_file, lines = parse_config_file(path)
        values.update(from_file)
        logger.info(f"Loaded {len(from_file)} settings from {path}")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        values[key] = value
        lines.pop(key, None)

    try:
        return RunConfig.model_validate(values)
    except ValidationError as e:
        first = e.errors()[0]
        key = str(first["loc"][0]) if first["loc"] else ""
        line = lines.get(key, 0)
        where = f"{path}:{line}: " if line else ""
        raise ConfigParseError(f"{where}invalid value for {key!r}: {first['msg']}", line=line) from e
