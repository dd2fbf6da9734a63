"""Two-phase UAV service coverage: LGCP belief exploration, then warm-started SAC."""

__version__ = "0.1.0"

from .config import RunConfig, appendix_scenario, desk_scenario, load_config, full_scenario  # noqa: E402
from .env import ServiceEnv  # noqa: E402
from .pipeline import run_phase1, run_phase2  # noqa: E402

__all__ = ["RunConfig", "ServiceEnv", "appendix_scenario", "desk_scenario", "load_config", "run_phase1",
           "run_phase2", "full_scenario", "__version__"]
