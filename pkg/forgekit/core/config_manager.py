"""
Configuration file management utilities.
Handles reading, parsing, validating and writing forgekit .cfg files.
"""
import configparser
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from forgekit.core.config import SECTION_TYPES, RunConfig, default_config_path
from forgekit.core.errors import ConfigError, DatasetIOError


def get_config_file_path(config_file: Optional[str] = None) -> Path:
    """Get the absolute path to the config file (the packaged default if none is given)."""
    if config_file:
        return Path(config_file).resolve()
    return default_config_path()


def read_config_file(config_file: Optional[str] = None) -> Dict[str, Dict[str, str]]:
    """
    Read and parse a .cfg configuration file.
    Returns a dictionary with sections as keys and their settings as nested dictionaries.
    Unknown sections or keys are reported as a ConfigError.
    """
    config = configparser.ConfigParser()
    config_path = get_config_file_path(config_file)

    try:
        with open(config_path, 'r') as fh:
            config.read_file(fh)
    except FileNotFoundError as e:
        raise ConfigError(f"Config file not found: {config_path}") from e
    except configparser.Error as e:
        raise ConfigError(f"Malformed config file {config_path}: {e}") from e

    result: Dict[str, Dict[str, str]] = OrderedDict()
    for section in config.sections():
        result[section] = OrderedDict()
        for key, value in config.items(section):
            result[section][key] = value

    errors = validate_config_updates(result)
    if errors:
        raise ConfigError("; ".join(errors))
    return dict(result)


def parse_overrides(overrides: Sequence[str]) -> Dict[str, Dict[str, str]]:
    """
    Parse dotted command-line overrides of the form ``section.key=value``.
    """
    updates: Dict[str, Dict[str, str]] = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"Override '{item}' must look like section.key=value")
        name, value = item.split("=", 1)
        if "." not in name:
            raise ConfigError(f"Override '{item}' needs a dotted section name")
        section, key = name.strip().split(".", 1)
        updates.setdefault(section, {})[key] = value.strip()

    errors = validate_config_updates(updates)
    if errors:
        raise ConfigError("; ".join(errors))
    return updates


def validate_config_updates(updates: Dict[str, Dict[str, str]]) -> List[str]:
    """
    Validate configuration sections and keys before applying them.
    Returns a list of validation errors (empty if valid).
    """
    errors = []
    for section, fields in updates.items():
        section_type = SECTION_TYPES.get(section)
        if section_type is None:
            errors.append(f"Section '{section}' does not exist in configuration")
            continue

        for key in fields:
            if key not in section_type.model_fields:
                errors.append(f"Key '{key}' does not exist in section '{section}'")

    return errors


def write_config_file(config: RunConfig, path: Path) -> Path:
    """
    Write the fully resolved configuration back out in .cfg form.
    The written file reproduces ``config`` exactly when read back.
    """
    parser = configparser.ConfigParser()
    dump = config.model_dump(mode="json")
    parser["run"] = {"seed": str(dump.pop("seed"))}
    for section, fields in dump.items():
        parser[section] = {
            key: _format_value(value)
            for key, value in fields.items()
            if value is not None
        }

    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w') as fh:
            parser.write(fh)
    except OSError as e:
        raise DatasetIOError(f"Error writing config file {path}: {e}") from e
    return path


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(str(item) for item in value)
    return str(value)
