"""Physics-informed surrogate environments for smart-grid RL control.

The package pairs a reference active-network-management environment (6-bus
distribution grid with renewables, storage, and daily demand profiles) with
a physics-informed neural surrogate trained purely from the governing
equations, plus the PPO machinery to compare policy training on either.
"""

__version__ = "0.1.0"

from .grid import GridConfig, default_config, load_config
from .env import Action, DailyProfiles, GridEnv, State

__all__ = [
    "__version__",
    "GridConfig",
    "default_config",
    "load_config",
    "Action",
    "DailyProfiles",
    "GridEnv",
    "State",
]
