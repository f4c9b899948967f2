import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_PATH = Path(__file__).parent.parent / "configs" / "search_space.yml"


class SearchSpace:
    """Value grid for one random-search profile"""

    def __init__(self, config: Dict[str, Any]):
        self.sizes: List[int] = [int(v) for v in config.get("sizes", [32, 64, 128, 200, 256])]
        self.l2_coefficients: List[float] = [float(v) for v in config.get("l2_coefficients", [0.1, 0.01, 0.001, 0.0001])]
        self.dropout_v: List[float] = [float(v) for v in config.get("dropout_v", [0.0, 0.2, 0.4, 0.6, 0.8])]
        self.dropout_c: List[float] = [float(v) for v in config.get("dropout_c", [0.0, 0.2, 0.4, 0.6, 0.8])]
        self.epochs: Optional[int] = config.get("epochs")

    def sample(self, rng) -> Dict[str, Any]:
        """Draw one trial; rng is a numpy Generator"""
        return {
            "size": int(rng.choice(self.sizes)),
            "l2_coefficient": float(rng.choice(self.l2_coefficients)),
            "dropout_v": float(rng.choice(self.dropout_v)),
            "dropout_c": float(rng.choice(self.dropout_c)),
        }

    def n_combinations(self) -> int:
        return len(self.sizes) * len(self.l2_coefficients) * len(self.dropout_v) * len(self.dropout_c)


class SearchSpaceRegistry:
    """Registry of search grids loaded from YAML, with a built-in default"""

    def __init__(self, config_path: Optional[Path] = None):
        self.config_path = Path(config_path) if config_path else DEFAULT_CONFIG_PATH
        self.profiles: Dict[str, SearchSpace] = {}
        self.default_profile: Optional[SearchSpace] = None
        self._load_profiles()

    def _load_profiles(self):
        """Load search grids from YAML configuration"""
        if not self.config_path.exists():
            logger.warning(f"⚠️ Search space configuration not found at {self.config_path}")
            self.default_profile = SearchSpace({})
            return

        try:
            with open(self.config_path, 'r', encoding='utf-8') as f:
                config = yaml.safe_load(f) or {}
        except (OSError, yaml.YAMLError) as e:
            logger.error(f"❌ Failed to load search space: {e}")
            self.default_profile = SearchSpace({})
            return

        self.default_profile = SearchSpace(config.get("default", {}))
        for name, profile_config in config.items():
            if name != "default":
                self.profiles[name] = SearchSpace(profile_config or {})
        logger.info(f"✅ Loaded {len(self.profiles)} search space profiles")

    def get_profile(self, name: Optional[str] = None) -> SearchSpace:
        """Named profile, or the default when the name is unknown"""
        if name and name in self.profiles:
            return self.profiles[name]
        if name and name != "default":
            logger.warning(f"⚠️ Unknown search profile {name}, using default")
        return self.default_profile

    def list_profiles(self) -> List[str]:
        return ["default"] + sorted(self.profiles)


search_space_registry = SearchSpaceRegistry()


def get_search_space(name: Optional[str] = None) -> SearchSpace:
    return search_space_registry.get_profile(name)
