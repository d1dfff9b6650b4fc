"""Approximate nearest neighbour, late-interaction and learned sparse retrieval."""
from loguru import logger

__version__ = "0.1.0"

logger.disable("vexir")

from .core import (  # noqa: E402
    DenseVector,
    EmbeddingSet,
    MultiEmbedding,
    ScoredHit,
    SearchResult,
    SparseVector,
)
from .errors import ConfigError, DataError, ExitCode, InvariantViolation, VexirError  # noqa: E402
