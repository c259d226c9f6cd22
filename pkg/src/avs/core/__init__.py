"""Core modules: configuration, logging, errors, scheduler."""

from avs.core.config import RunConfig, Settings, get_settings
from avs.core.logger import setup_logging

__all__ = ["RunConfig", "Settings", "get_settings", "setup_logging"]
