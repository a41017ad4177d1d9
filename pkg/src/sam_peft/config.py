from __future__ import annotations

import logging
import os
from collections.abc import Mapping
from functools import lru_cache
from pathlib import Path
from typing import Any

from pydantic import BaseModel, ValidationError

from .errors import ConfigError


def _env_flag(name: str, default: bool) -> bool:
    raw = os.getenv(name)
    if raw is None:
        return default
    return raw.strip().lower() not in {"0", "false", "no", "off", ""}


class Settings(BaseModel):
    # Project root (repo root in local dev)
    project_root: Path = Path(__file__).resolve().parents[2]

    # Where train/eval/sweep write their artefacts when no explicit path is given.
    # If None, we default to runs/ under project root.
    runs_dir: Path | None = None

    log_level: str = "INFO"

    # Master seed used when a command is not given --seed
    default_seed: int = 0

    # tqdm progress bars on long loops
    progress: bool = True

    # Default worker bound for sweeps
    jobs: int = 1

    def model_post_init(self, __context: object) -> None:  # type: ignore[override]
        env_path = os.getenv("SAM_PEFT_RUNS_DIR")
        if env_path:
            object.__setattr__(self, "runs_dir", Path(env_path))
        elif self.runs_dir is None:
            object.__setattr__(self, "runs_dir", self.project_root / "runs")


@lru_cache
def get_settings() -> Settings:
    return Settings(
        log_level=os.getenv("SAM_PEFT_LOG_LEVEL", "INFO"),
        default_seed=int(os.getenv("SAM_PEFT_SEED", "0")),
        progress=_env_flag("SAM_PEFT_PROGRESS", True),
        jobs=int(os.getenv("SAM_PEFT_JOBS", "1")),
    )


def parse_model[M: BaseModel](cls: type[M], data: Mapping[str, Any]) -> M:
    """Validate `data` into `cls`, reporting problems as a ConfigError."""
    try:
        return cls.model_validate(dict(data))
    except ValidationError as exc:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or cls.__name__}: {err['msg']}" for err in exc.errors()
        )
        raise ConfigError(f"invalid {cls.__name__}: {problems}") from None


def configure_logging(level: str | None = None) -> None:
    """Configure the root logger once, from the explicit level or the settings."""
    name = (level or get_settings().log_level).upper()
    logging.basicConfig(
        level=getattr(logging, name, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
