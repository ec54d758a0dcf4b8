"""Verification and explanation of neural ordering policies on a perishable
platelet inventory MDP."""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    ConfigError,
    InvalidInput,
    MemoryBudgetExceeded,
    ModelFormatError,
    PlateletMCError,
    PolicyFormatError,
    TrainingDiverged,
    UnknownLabel,
)
from .mdp import InventoryState, ModelConfig, load_config, miniature_config  # noqa: F401
from .model import SparseModel  # noqa: F401
