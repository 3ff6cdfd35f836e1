from typing import Dict, Iterable

from utils.error_handler import ConfigError
from utils.logger import get_logger

logger = get_logger(__name__)


def load_flat_config(path: str, allowed: Iterable[str]) -> Dict[str, str]:
    """Parse a flat key=value file; unknown keys are rejected"""
    allowed = set(allowed)
    values = {}
    try:
        with open(path, 'r') as f:
            lines = f.readlines()
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {e}")

    for lineno, raw in enumerate(lines, start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (part.strip() for part in line.split('=', 1))
        key = key.replace('-', '_')
        if key not in allowed:
            raise ConfigError(f"{path}:{lineno}: unknown key '{key}'", code='CFG_004')
        values[key] = value
    logger.debug(f"Loaded {len(values)} options from {path}")
    return values
