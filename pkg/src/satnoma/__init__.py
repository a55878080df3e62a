"""Cache-enabled terrestrial-satellite NOMA downlink with multi-agent DDPG control."""

from .config import NetworkConfig, TrainConfig, load_config, validate_config
from .env import CacheEnv, CentralizedEnv, ResourceEnv
from .maddpg import MADDPG, train_cache, train_resource

__all__ = [
    "NetworkConfig", "TrainConfig", "load_config", "validate_config",
    "ResourceEnv", "CacheEnv", "CentralizedEnv",
    "MADDPG", "train_resource", "train_cache",
]
__version__ = "0.1.0"
