"""Needle insertion in soft tissue: co-rotational FE foam, beam needle, sliding
constraints, inverse-simulation control and an ELM surrogate controller."""

from .config import Config, load_config, parse_config
from .errors import (ConfigError, ConstraintDegeneracyError, DataError, MeshError,
                     NeedleForgeError, SimulationDiverged, UsageError)

__version__ = "0.1.0"

__all__ = ["Config", "load_config", "parse_config", "ConfigError", "ConstraintDegeneracyError",
           "DataError", "MeshError", "NeedleForgeError", "SimulationDiverged", "UsageError"]
