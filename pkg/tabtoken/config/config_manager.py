"""
Configuration Manager for tabtoken runs
Handles loading, merging and validation of layered run configuration files
"""

import os
import logging
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import yaml
from pydantic import ValidationError

from ..errors import TabTokenError
from ..schemas import RunConfig

logger = logging.getLogger(__name__)

CONFIG_DIR = Path(__file__).parent


class Environment(Enum):
    PUBLISHED = "published"
    DESK = "desk"


class ConfigurationError(TabTokenError):
    """Raised when configuration is invalid; `keys` lists every offending dotted key"""
    exit_code = 2
    kind = "config"

    def __init__(self, message: str, keys: Optional[List[str]] = None):
        super().__init__(message)
        self.keys = keys or []


class ConfigManager:
    """
    Central configuration manager that handles:
    - Loading base configuration (published defaults)
    - Environment-specific overrides
    - A user run-config file and command-line overrides
    - Environment variable substitution
    - Validation against RunConfig
    """

    def __init__(self, config_dir: Union[str, Path, None] = None, environment: Optional[str] = None):
        self.config_dir = Path(config_dir) if config_dir is not None else CONFIG_DIR
        self.environment = environment or os.getenv("TABTOKEN_ENV", Environment.PUBLISHED.value)

    def load_config(self, user_file: Union[str, Path, None] = None,
                    overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        """Merged configuration dict: base <- environment <- user file <- overrides"""
        merged = self._load_yaml_file(self.config_dir / "base.yaml")

        env_config_path = self.config_dir / "environments" / f"{self.environment}.yaml"
        if env_config_path.exists():
            merged = self._deep_merge(merged, self._load_yaml_file(env_config_path))
            logger.debug(f"Loaded environment config for: {self.environment}")
        else:
            logger.warning(f"No environment config found for: {self.environment}")

        if user_file is not None:
            user_path = Path(user_file)
            if not user_path.exists():
                raise ConfigurationError(f"Configuration file not found: {user_path}", keys=[str(user_path)])
            merged = self._deep_merge(merged, self._load_yaml_file(user_path))
            logger.debug(f"Loaded run config: {user_path}")

        merged = self._deep_merge(merged, overrides or {})
        return self._substitute_env_vars(merged)

    def run_config(self, user_file: Union[str, Path, None] = None,
                   overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
        return self._validate_config(self.load_config(user_file, overrides))

    def _load_yaml_file(self, file_path: Path) -> Dict[str, Any]:
        """Load a YAML (or JSON, which YAML accepts) mapping"""
        try:
            with open(file_path, "r", encoding="utf-8") as f:
                loaded = yaml.safe_load(f) or {}
        except FileNotFoundError:
            logger.warning(f"Configuration file not found: {file_path}")
            return {}
        except yaml.YAMLError as e:
            raise ConfigurationError(f"Invalid YAML in {file_path}: {e}", keys=[str(file_path)])
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"Configuration file {file_path} must hold a mapping", keys=[str(file_path)])
        return loaded

    def _deep_merge(self, base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
        result = base.copy()

        for key, value in override.items():
            if key in result and isinstance(result[key], dict) and isinstance(value, dict):
                result[key] = self._deep_merge(result[key], value)
            else:
                result[key] = value

        return result

    def _substitute_env_vars(self, config: Any) -> Any:
        """Recursively substitute ${VAR} and ${VAR:default} strings"""
        if isinstance(config, dict):
            return {key: self._substitute_env_vars(value) for key, value in config.items()}
        elif isinstance(config, list):
            return [self._substitute_env_vars(item) for item in config]
        elif isinstance(config, str) and config.startswith("${") and config.endswith("}"):
            env_var = config[2:-1]
            default_value = ""

            if ":" in env_var:
                env_var, default_value = env_var.split(":", 1)

            return os.getenv(env_var, default_value)
        else:
            return config

    def _validate_config(self, config: Dict[str, Any]) -> RunConfig:
        try:
            return RunConfig.model_validate(config)
        except ValidationError as e:
            keys = [".".join(str(part) for part in err["loc"]) or "<root>" for err in e.errors()]
            details = "; ".join(f"{key}: {err['msg']}" for key, err in zip(keys, e.errors()))
            raise ConfigurationError(f"Invalid configuration ({len(keys)} errors): {details}", keys=keys)


def load_run_config(user_file: Union[str, Path, None] = None, environment: Optional[str] = None,
                    overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Validated RunConfig for one run"""
    return ConfigManager(environment=environment).run_config(user_file, overrides)
