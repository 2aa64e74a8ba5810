"""
Configuration Management

Parses run configurations written in the flat `key = value` grammar into a
validated RunConfig, and exposes process-level settings read from the
environment (a `.env` file is loaded when present).
"""

import difflib
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from dotenv import load_dotenv
from pydantic import ValidationError

from app.models.settings import RunConfig
from app.utils.errors import ConfigError

# Load environment variables from .env
load_dotenv()

logger = logging.getLogger(__name__)

RESOLVED_CONFIG_NAME = "resolved_config.txt"


def _strip_comment(line: str) -> str:
    """Drop a trailing `#` comment that is not inside quotes."""
    quote: Optional[str] = None
    for i, ch in enumerate(line):
        if quote:
            if ch == quote:
                quote = None
        elif ch in ("'", '"'):
            quote = ch
        elif ch == "#":
            return line[:i]
    return line


def _parse_value(raw: str) -> str:
    """
    Unquote a raw value.

    Type conversion (numbers, booleans, comma lists) is left to the section
    models, so a value keeps its textual form until validation.
    """
    value = raw.strip()
    if len(value) >= 2 and value[0] == value[-1] and value[0] in ("'", '"'):
        return value[1:-1]
    return value


def parse_lines(lines: List[str], source: str = "<config>") -> Dict[str, str]:
    """
    Split config lines into a flat dotted-key dict.

    Args:
        lines: File content split into lines
        source: Name used in error messages

    Returns:
        Dict mapping "section.name" to the raw (unquoted) value

    Raises:
        ConfigError: On malformed lines, unknown or duplicate keys
    """
    known = RunConfig.known_keys()
    flat: Dict[str, str] = {}
    for number, line in enumerate(lines, start=1):
        text = _strip_comment(line).strip()
        if not text:
            continue
        key, sep, raw = text.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{number}: expected 'key = value', got '{line.strip()}'")
        if key not in known:
            nearest = difflib.get_close_matches(key, known, n=1, cutoff=0.0)
            hint = f"; did you mean '{nearest[0]}'?" if nearest else ""
            raise ConfigError(f"{source}:{number}: unknown key '{key}'{hint}", key=key)
        if key in flat:
            raise ConfigError(f"{source}:{number}: duplicate key '{key}'", key=key)
        flat[key] = _parse_value(raw)
    return flat


def _first_error(error: ValidationError) -> Tuple[str, str]:
    """Dotted key and message of the first validation error."""
    detail = error.errors()[0]
    loc = [str(part) for part in detail["loc"][:2]]
    if detail["type"] == "missing":
        if len(loc) == 1:
            # Whole section absent: name its first required key
            model = RunConfig.sections()[loc[0]]
            required = [n for n, f in model.model_fields.items() if f.is_required()]
            loc = loc + required[:1]
        key = ".".join(loc)
        return key, f"missing required key '{key}'"
    key = ".".join(loc)
    message = detail["msg"].removeprefix("Value error, ")
    return key, f"{key}: {message}" if key else message


def build_config(flat: Dict[str, Any], base_dir: Optional[Path] = None) -> RunConfig:
    """
    Validate a flat dict and resolve input paths.

    Args:
        flat: Dotted-key dict
        base_dir: Directory relative matter paths resolve against

    Returns:
        Validated RunConfig with absolute matter paths

    Raises:
        ConfigError: On type, range or cross-section errors, or missing input files
    """
    try:
        config = RunConfig.from_flat_dict(flat)
    except ValidationError as e:
        key, message = _first_error(e)
        raise ConfigError(message, key=key) from e
    except ValueError as e:
        raise ConfigError(str(e)) from e

    if base_dir is not None:
        config = config.resolve_paths(base_dir)
    inputs = (("matter.magnitude", config.matter.magnitude), ("matter.phase", config.matter.phase))
    for key, value in inputs:
        if value is not None and not Path(value).is_file():
            raise ConfigError(f"{key}: file not found: {value}", key=key)
    return config


def parse_config(path: str | Path) -> RunConfig:
    """
    Read and validate a run configuration file.

    Args:
        path: Config file in the flat grammar

    Returns:
        RunConfig with defaults filled and paths resolved against the file's directory

    Raises:
        ConfigError: If the file is missing or any key is invalid
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    config = build_config(parse_lines(lines, path.name), path.parent)
    logger.info(f"Loaded configuration from {path}")
    for line in format_resolved(config).splitlines():
        logger.info(f"  {line}")
    return config


def _format_value(value: Any) -> str:
    if isinstance(value, list):
        # List items are bare; quoting would swallow the separators
        return ", ".join(str(v) if not isinstance(v, float) else repr(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return f'"{value}"'
    return str(value)


def format_resolved(config: RunConfig) -> str:
    """
    Every key with its resolved value, in the input grammar.

    Unset optional keys appear as comments so the output parses back to the
    same configuration.
    """
    lines = []
    for key, value in sorted(config.to_flat_dict().items()):
        if value is None:
            lines.append(f"# {key} = (auto)")
        else:
            lines.append(f"{key} = {_format_value(value)}")
    return "\n".join(lines) + "\n"


def write_resolved_config(config: RunConfig, directory: Path) -> Path:
    """Write resolved_config.txt into the output directory."""
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / RESOLVED_CONFIG_NAME
    path.write_text(format_resolved(config), encoding="utf-8")
    return path


class Config:
    """
    Process-level configuration loader.

    Reads environment variables (and `.env`) that are independent of any
    single run: logging and the default thread count.
    """

    def __init__(self):
        """Initialize configuration from environment variables"""
        # Logging
        self.log_level = os.getenv("LOG_LEVEL", "INFO")
        self.log_format = os.getenv("LOG_FORMAT", "text")
        self.log_file = os.getenv("LOG_FILE")

        # Parallelism (0 keeps the numba default)
        self.threads = self._parse_int("QDIFF_THREADS", 0)

    @staticmethod
    def _parse_int(name: str, default: int) -> int:
        raw = os.getenv(name)
        if raw is None or not raw.strip():
            return default
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"Environment variable {name} must be an integer, got '{raw}'")

    def validate(self) -> list[str]:
        """
        Validate environment settings.

        Returns:
            List of validation error messages (empty if valid)
        """
        errors = []
        if self.log_level.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            errors.append(f"LOG_LEVEL '{self.log_level}' is not a logging level")
        if self.log_format not in ("json", "text"):
            errors.append(f"LOG_FORMAT must be 'json' or 'text', got '{self.log_format}'")
        if self.threads < 0:
            errors.append(f"QDIFF_THREADS must be non-negative, got {self.threads}")
        return errors
