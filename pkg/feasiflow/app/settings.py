"""
Runtime settings for feasiflow.

Defaults come from environment variables (optionally loaded from a `.env` file in the
working directory) and can always be overridden by explicit arguments:

- FEASIFLOW_SEED: default random seed (default: 0)
- FEASIFLOW_THREADS: worker count for scoring (default: available CPUs)
- FEASIFLOW_LOG_LEVEL: logging level name (default: INFO)
- FEASIFLOW_OUTPUT_DIR: base directory for run outputs (default: ./runs)
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional, Union

from dotenv import dotenv_values, load_dotenv

from feasiflow.app.errors import ConfigError, UsageError

# Load environment variables from .env file
load_dotenv()

LOG_FORMAT = "[%(levelname)s] %(name)s: %(message)s"


# ============================================================================
# ENVIRONMENT DEFAULTS
# ============================================================================

def get_default_seed(seed: Optional[int] = None) -> int:
    if seed is not None:
        return int(seed)
    raw = os.getenv("FEASIFLOW_SEED", "0")
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"FEASIFLOW_SEED must be an integer, got {raw!r}") from exc


def get_default_threads(threads: Optional[int] = None) -> int:
    """Worker count: explicit value, then FEASIFLOW_THREADS, then available CPUs."""
    if threads is None:
        raw = os.getenv("FEASIFLOW_THREADS")
        if raw is None:
            return max(1, os.cpu_count() or 1)
        try:
            threads = int(raw)
        except ValueError as exc:
            raise ConfigError(f"FEASIFLOW_THREADS must be an integer, got {raw!r}") from exc
    if threads < 1:
        raise ConfigError(f"thread count must be >= 1, got {threads}")
    return int(threads)


def get_log_level(level: Optional[str] = None) -> int:
    name = (level or os.getenv("FEASIFLOW_LOG_LEVEL", "INFO")).upper()
    value = logging.getLevelName(name)
    if not isinstance(value, int):
        raise ConfigError(f"unknown log level {name!r}")
    return value


def get_output_dir(output_dir: Optional[Union[str, Path]] = None) -> Path:
    return Path(output_dir or os.getenv("FEASIFLOW_OUTPUT_DIR", "runs"))


def configure_logging(level: Optional[str] = None) -> None:
    logging.basicConfig(level=get_log_level(level), format=LOG_FORMAT, force=True)


# ============================================================================
# CONFIG FILES
# ============================================================================

def load_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """
    Read a configuration file into a plain dict.

    `.json` files are parsed as JSON objects; anything else is read as `key=value`
    lines with dotenv syntax (comments, quoting and blank lines allowed). Values from
    key=value files stay strings; pydantic coerces them on validation.
    """
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")

    if path.suffix.lower() == ".json":
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must contain a JSON object")
        return data

    values = dotenv_values(path)
    return {key.strip().lower(): value for key, value in values.items() if value is not None}
