from .config_manager import ConfigManager, ConfigurationError, Environment, load_run_config

__all__ = ["ConfigManager", "ConfigurationError", "Environment", "load_run_config"]
