"""Semantic speech embeddings without transcriptions.

Pipeline: continuous feature sequences are discretized with k-means,
deduplicated, re-tokenized with BPE, and embedded into a single vector either
by a sequential autoencoder trained on raw features or by a student encoder
distilled from a text-style teacher over the discovered units.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    FileFormatError,
    MissingGroundTruthError,
    PairBinningError,
    SemspeechError,
    ValidationError,
)

__all__ = [
    "ConfigError",
    "FileFormatError",
    "MissingGroundTruthError",
    "PairBinningError",
    "SemspeechError",
    "ValidationError",
    "__version__",
]
