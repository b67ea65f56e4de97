"""
Exception hierarchy for the folded attention library.
Every error raised on purpose by the package derives from FoldedAttentionError,
so callers (and the CLI) can tell library failures from programming mistakes.
"""

from typing import Optional


class FoldedAttentionError(Exception):
    """Base class for all library errors."""


class ShapeMismatchError(FoldedAttentionError, ValueError):
    """Raised when ranks, shapes or dimensions of operands disagree."""


class IndexOutOfBoundsError(FoldedAttentionError, IndexError):
    """Raised when a multi-index falls outside a tensor's shape."""


class NonFiniteError(FoldedAttentionError, ValueError):
    """Raised when NaN or Inf values are fed to, or produced by, a kernel."""

    def __init__(self, message: str, node_id: Optional[int] = None):
        if node_id is not None:
            message = f"{message} (tape node {node_id})"
        super().__init__(message)
        self.node_id = node_id


class MemoryBudgetError(FoldedAttentionError):
    """Raised when a dense N x N affinity would not fit the configured budget."""

    def __init__(self, required_bytes: int, budget_bytes: int, what: str = "affinity matrix"):
        super().__init__(
            f"{what} needs {required_bytes:,} bytes which exceeds the "
            f"memory budget of {budget_bytes:,} bytes (FA_MEM_BUDGET_BYTES)"
        )
        self.required_bytes = required_bytes
        self.budget_bytes = budget_bytes


class GuardExceededError(FoldedAttentionError):
    """Raised when a brute-force reference is asked to run on too large an input."""

    def __init__(self, elements: int, limit: int, what: str):
        super().__init__(
            f"{what} is limited to {limit:,} elements, got {elements:,}"
        )
        self.elements = elements
        self.limit = limit


class UnsupportedPrimitiveError(FoldedAttentionError):
    """Raised when a graph asks the tape for an operation it cannot differentiate."""


class ConfigurationError(FoldedAttentionError, ValueError):
    """Raised for invalid environment or command-line configuration."""
