"""
Shared utilities and configuration for the folded attention library.
"""

import logging
import os
from functools import lru_cache
from typing import Dict, List, Optional, Sequence

import numpy as np
from dotenv import load_dotenv

from src.errors import (
    ConfigurationError,
    GuardExceededError,
    MemoryBudgetError,
    NonFiniteError,
    ShapeMismatchError,
)
from src.tensor_core import FeatureTensor


DEFAULT_MEM_BUDGET_BYTES = 1 << 30
DEFAULT_COST_BYTE_BUDGET = 64 * 10**9
DEFAULT_ELEMENT_BYTES = 4
DEFAULT_ORACLE_MAX_ELEMENTS = 10_000
DEFAULT_GRADCHECK_MAX_ELEMENTS = 1_000


class FAConfig:
    """Configuration loaded from the environment (and an optional .env file)."""

    _INTEGER_SETTINGS = {
        "FA_MEM_BUDGET_BYTES": DEFAULT_MEM_BUDGET_BYTES,
        "FA_COST_BYTE_BUDGET": DEFAULT_COST_BYTE_BUDGET,
        "FA_ELEMENT_BYTES": DEFAULT_ELEMENT_BYTES,
        "FA_ORACLE_MAX_ELEMENTS": DEFAULT_ORACLE_MAX_ELEMENTS,
        "FA_GRADCHECK_MAX_ELEMENTS": DEFAULT_GRADCHECK_MAX_ELEMENTS,
    }

    def __init__(self, environ: Optional[Dict[str, str]] = None):
        if environ is None:
            load_dotenv()
            environ = dict(os.environ)
        self._raw = {key: environ.get(key) for key in self._INTEGER_SETTINGS}
        self._invalid: List[str] = []

        self.mem_budget_bytes = self._integer("FA_MEM_BUDGET_BYTES")
        self.cost_byte_budget = self._integer("FA_COST_BYTE_BUDGET")
        self.element_bytes = self._integer("FA_ELEMENT_BYTES")
        self.oracle_max_elements = self._integer("FA_ORACLE_MAX_ELEMENTS")
        self.gradcheck_max_elements = self._integer("FA_GRADCHECK_MAX_ELEMENTS")
        self.log_level = (environ.get("FA_LOG_LEVEL") or "WARNING").upper()
        if not isinstance(logging.getLevelName(self.log_level), int):
            self._invalid.append("FA_LOG_LEVEL")
            self.log_level = "WARNING"

    def _integer(self, key: str) -> int:
        raw = self._raw.get(key)
        default = self._INTEGER_SETTINGS[key]
        if raw is None or raw.strip() == "":
            return default
        try:
            value = int(raw.strip().replace("_", ""))
        except ValueError:
            self._invalid.append(key)
            return default
        if value <= 0:
            self._invalid.append(key)
            return default
        return value

    def validate(self) -> bool:
        """
        Validate that every configured value parsed correctly.

        Returns:
            True if configuration is valid, False otherwise
        """
        return not self._invalid

    def get_invalid_config(self) -> List[str]:
        """
        Get list of environment variables that were set but could not be used.

        Returns:
            List of offending configuration keys
        """
        return list(self._invalid)

    def require_valid(self) -> "FAConfig":
        """Raise ConfigurationError unless every setting is valid."""
        if self._invalid:
            raise ConfigurationError(
                "Invalid configuration values: " + ", ".join(self._invalid)
            )
        return self


@lru_cache(maxsize=1)
def get_config() -> FAConfig:
    """Process-wide configuration, read once."""
    return FAConfig()


def configure_logging(level: Optional[str] = None) -> None:
    """Configure root logging for command-line use."""
    logging.basicConfig(
        level=level or get_config().log_level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    """
    Random generator for one trial.

    Randomness depends only on (seed, trial), so trials can run in any order
    and still draw the same instances.
    """
    return np.random.default_rng([seed, trial])


def random_tensor(shape: Sequence[int], rng: np.random.Generator) -> FeatureTensor:
    """Draw a FeatureTensor with standard normal entries."""
    return FeatureTensor(rng.standard_normal(tuple(shape)))


def check_shape(shape: Sequence[int], rank: Optional[int] = None) -> tuple:
    """
    Validate a shape given on the command line or in a config file.

    Args:
        shape: Axis lengths
        rank: Required number of axes, if any

    Returns:
        The shape as a tuple of ints
    """
    shape = tuple(int(s) for s in shape)
    if rank is not None and len(shape) != rank:
        raise ConfigurationError(f"expected {rank} axis lengths, got {len(shape)}")
    if any(s < 1 for s in shape):
        raise ConfigurationError(f"axis lengths must be >= 1, got {shape}")
    return shape


def print_setup_instructions():
    """Print configuration instructions for the user."""
    print("\n❌ Configuration Error")
    print("=" * 50)
    print("Please ensure your environment is properly configured:")
    print("\n1. Copy .env.example to .env:")
    print("   cp .env.example .env")
    print("\n2. Edit .env; every value must be a positive integer:")
    print("   - FA_MEM_BUDGET_BYTES: memory budget for dense N x N affinities")
    print("   - FA_COST_BYTE_BUDGET: byte budget for the cost model feasibility flag")
    print("   - FA_ELEMENT_BYTES: element width used by the cost model")
    print("   - FA_ORACLE_MAX_ELEMENTS / FA_GRADCHECK_MAX_ELEMENTS: size guards")
    print("=" * 50)


def print_error_help(error: Exception):
    """
    Print helpful error information based on the exception type.

    Args:
        error: The exception that occurred
    """
    print(f"\n❌ Error: {error}")

    if isinstance(error, GuardExceededError):
        print("\n📏 Size Guard:")
        print("- The brute-force references enumerate every element pair")
        print("- Use a smaller --shape, or raise FA_ORACLE_MAX_ELEMENTS deliberately")

    elif isinstance(error, MemoryBudgetError):
        print("\n💾 Memory Budget:")
        print("- Dense self-attention stores an N x N affinity matrix")
        print("- Use folded attention, a smaller --shape, or raise --budget-bytes")

    elif isinstance(error, ShapeMismatchError):
        print("\n📐 Shape Issue:")
        print("- Check that --shape has four positive entries H,W,D,C")

    elif isinstance(error, NonFiniteError):
        print("\n🔢 Numerical Issue:")
        print("- A kernel met NaN or Inf values; inputs are drawn from N(0, 1)")

    else:
        print_setup_instructions()
