import copy
import logging
import os
from pathlib import Path

import yaml  # type: ignore

from .errors import ConfigError

logger = logging.getLogger(__name__)

PROJECT_CONFIG_FILE = ".scenariofuzz"
STATE_ENV_VAR = "SCENARIOFUZZ_STATE"
DEFAULT_STATE_DIR = "state"

DEFAULT_CONFIG = {
    "campaign": {
        "map": None,
        "strategy": "2SMS+SEM",
        "cycles": 3,
        "mutants": None,
        "executed": 3,
        "retrain_every": 1000,
        "rng_seed": 0,
        "resume": False,
    },
    "filter": {
        "road_type": None,
        "traffic_light": None,
        "sign_kind": None,
    },
    "limits": {
        "horizon": 60.0,
        "stuck_timeout": 300.0,
        "dt": 0.05,
    },
    "sem": {
        "hidden": 64,
        "heads": 4,
        "dropout": 0.1,
        "lr": 0.001,
        "epochs": 1000,
    },
    "mutation": {
        "max_objects": 8,
        "max_puddles": 5,
        "direction": None,
    },
    "corpus": {
        "map_file": None,
        "spacing": 5.0,
        "light_radius": 25.0,
        "near_radius": 40.0,
        "cluster_radius": 30.0,
        "sign_radius": 50.0,
        "max_hops": 60,
    },
    "agent": {
        "height_cutoff": 1.0,
        "blind_colors": ["red"],
        "weather_scaling": True,
        "command": None,
    },
}


def _deep_merge(base, override, where=""):
    merged = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if key not in merged:
            raise ConfigError(f"Unknown config key: {where}{key}")
        if isinstance(merged[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"Config section {where}{key} must be a mapping")
            merged[key] = _deep_merge(merged[key], value, f"{where}{key}.")
        else:
            merged[key] = value
    return merged


def load_project_config(directory=None):
    """Loads `section.key = value` overrides from a local .scenariofuzz file."""
    project_config_path = Path(directory or Path.cwd()) / PROJECT_CONFIG_FILE
    logger.debug(f"Looking for project config at: {project_config_path}")
    overrides = {}
    if not project_config_path.exists():
        return overrides
    logger.info(f"Found project config file: {project_config_path}")
    with open(project_config_path, "r") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#") or "=" not in line:
                continue
            key, value = line.split("=", 1)
            section, _, name = key.strip().partition(".")
            if not name:
                raise ConfigError(f"Project override '{key.strip()}' must look like section.key")
            overrides.setdefault(section, {})[name] = yaml.safe_load(value.strip())
    logger.debug(f"Loaded project config: {overrides}")
    return overrides


def load_config(path=None, project_dir=None):
    """YAML campaign config merged over DEFAULT_CONFIG; the project file has priority."""
    user_config = {}
    if path is not None:
        logger.debug(f"Loading campaign config from: {path}")
        with open(path, "r") as f:
            try:
                user_config = yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise ConfigError(f"Cannot parse {path}: {e}") from e
        if not isinstance(user_config, dict):
            raise ConfigError(f"{path} must contain a mapping of sections")
    merged = _deep_merge(DEFAULT_CONFIG, user_config)
    project_config = load_project_config(project_dir)
    if project_config:
        logger.info(f"Merging {sum(len(v) for v in project_config.values())} project-specific settings")
        merged = _deep_merge(merged, project_config)
    return merged


def resolve_state_dir(cli_value=None) -> Path:
    value = cli_value or os.environ.get(STATE_ENV_VAR) or DEFAULT_STATE_DIR
    return Path(value)
