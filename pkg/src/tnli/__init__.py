"""Temporal entailment pretraining over synthetic clinical timelines."""

__version__ = "0.1.0"

from .errors import (
    CheckpointError,
    ConfigError,
    CorpusError,
    NumericalError,
    OntologyError,
    TnliError,
)

__all__ = [
    "__version__",
    "TnliError",
    "ConfigError",
    "OntologyError",
    "CorpusError",
    "CheckpointError",
    "NumericalError",
]
