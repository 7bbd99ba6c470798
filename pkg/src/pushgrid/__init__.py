"""Learning to push objects through clutter from occupancy-grid observations.

Modules: ``scene`` (geometry, grids), ``dynamics`` (quasi-static pushing),
``env`` (vectorised environment), ``nn`` (networks and grid extractors),
``ppo`` (recurrent PPO), ``evalbench`` (evaluation suites) and ``cli``.
"""

from pushgrid.env import Action, PushEnv, VecPushEnv
from pushgrid.scenarios import EVAL_SUITE, SCENARIOS, ScenarioSpec, get_scenario
from pushgrid.scene import OccupancyGrid, Pose2D, ShapeSpec, Workspace

__version__ = "0.1.0"

__all__ = [
    "Action", "PushEnv", "VecPushEnv", "EVAL_SUITE", "SCENARIOS", "ScenarioSpec", "get_scenario",
    "OccupancyGrid", "Pose2D", "ShapeSpec", "Workspace", "__version__",
]
