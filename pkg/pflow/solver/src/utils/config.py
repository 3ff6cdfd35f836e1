import os
import yaml
from typing import Dict, Any

from dotenv import load_dotenv


class SolverConfig:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __init__(self):
        if not hasattr(self, 'initialized'):
            load_dotenv()
            self.config = self._load_config()
            self.initialized = True

    def _load_config(self) -> Dict[str, Any]:
        config_path = os.path.join(
            os.path.dirname(__file__),
            '../../config/defaults.yaml'
        )
        try:
            with open(config_path, 'r') as f:
                return yaml.safe_load(f) or {}
        except Exception as e:
            print(f"Failed to load solver defaults: {e}")
            return {}

    def get(self, key: str, default: Any = None) -> Any:
        """Dotted lookup, e.g. get('stepper.tol')"""
        value = self.config
        for k in key.split('.'):
            if not isinstance(value, dict) or k not in value:
                return default
            value = value[k]
        return value

    @property
    def max_threads(self) -> int:
        """Worker cap from PFLOW_THREADS (0 means no cap)"""
        try:
            return max(0, int(os.environ.get('PFLOW_THREADS', '0')))
        except ValueError:
            return 0


solver_config = SolverConfig()
