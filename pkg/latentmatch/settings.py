"""
Default settings for latentmatch

Values come from a JSON file (``config.json`` by default) layered over the
built-in defaults below; the command line overrides both.
"""

import copy
import json
import logging
import os
from typing import Dict, Optional

from .exceptions import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_SETTINGS_FILE = "config.json"

DEFAULTS: Dict[str, Dict] = {
    "logging": {
        "debug": False,
        "log_dir": "",
        "max_bytes": 10 * 1024 * 1024,
        "backup_count": 5,
    },
    "corpus": {
        "min_count": 1,
        "chunk_size": 20000,
    },
    "knowledge": {
        "synonym_top_k": 1000,
        "logistic_scale": 1.0,
        "tag_top_k": 10,
    },
    "training": {
        "dim": 100,
        "theta2": 0.01,
        "lambda2": 0.1,
        "rho2": 0.1,
        "alpha": 0.0,
        "beta": 0.0,
        "gamma": 0.01,
        "max_iters": 100,
        "warm_start_max_iters": 20,
        "tol": 1e-5,
        "seed": 0,
        "method": "coordinate",
        "sweep": "gauss_seidel",
        "block_size": 512,
    },
    "ranking": {
        "mode": "combined",
        "top_k": 20,
        "k1": 1.2,
        "b": 0.75,
    },
    "evaluation": {
        "cutoffs": [1, 3, 5, 10],
        "ideal_from_judgments": False,
    },
}


def load_settings(path: Optional[str] = None) -> Dict[str, Dict]:
    """Load settings from a JSON file, falling back to defaults

    A missing default file is not an error; a missing explicitly named file
    or an unparsable one is.
    """
    settings = copy.deepcopy(DEFAULTS)
    explicit = path is not None
    path = path or DEFAULT_SETTINGS_FILE

    if not os.path.exists(path):
        if explicit:
            raise ConfigError(f"Settings file not found: {path}")
        return settings

    try:
        with open(path, 'r', encoding='utf-8') as f:
            loaded = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Invalid settings file {path}: {e}") from e

    for section, values in loaded.items():
        if section not in settings:
            logger.warning(f"Ignoring unknown settings section '{section}' in {path}")
            continue
        if not isinstance(values, dict):
            raise ConfigError(f"Settings section '{section}' in {path} must be an object")
        for key, value in values.items():
            if key not in settings[section]:
                logger.warning(f"Ignoring unknown setting '{section}.{key}' in {path}")
                continue
            settings[section][key] = value

    logger.debug(f"Loaded settings from {path}")
    return settings
