from pathlib import Path
from typing import Dict, List, Tuple, Union

from pydantic_settings import BaseSettings, SettingsConfigDict

from dosediff.core.errors import ConfigurationError


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="DOSEDIFF_", env_file=".env", extra="ignore")

    PROJECT_NAME: str = "dosediff"
    LOG_LEVEL: str = "INFO"
    LOG_DIR: str = "./logs"

    # Standard linear DDPM schedule; untuned for PET
    SCHEDULE_T: int = 1000
    BETA_START: float = 1e-4
    BETA_END: float = 0.02

    # Desk-scale phantom defaults
    PHANTOM_WIDTH: int = 32
    PHANTOM_SLICES: int = 32
    VOXEL_SIZE_MM: Tuple[float, float, float] = (2.89, 1.67, 1.67)
    FULL_DOSE_BQ: float = 3.7e8
    FRACTION_LADDER: List[float] = [0.01, 0.02, 0.05, 0.10, 0.25, 0.50]

    # Conditioning
    N_SLICES: int = 31
    EMBEDDING_DIM: int = 64

    THREADS: int = 1


settings = Settings()


def parse_flat_config(text: str, source: str = "<string>") -> Dict[str, str]:
    """Parse `key = value` lines; later keys override earlier ones."""
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigurationError(f"{source}:{lineno}: empty key")
        values[key] = value.strip()
    return values


def load_config_file(path: Union[str, Path]) -> Dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigurationError(f"cannot read config file {path}: {e}") from e
    return parse_flat_config(text, source=str(path))


def format_flat_config(values: Dict[str, object]) -> str:
    lines = []
    for key in sorted(values):
        value = values[key]
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
