"""Shared exception types.

The CLI maps these onto fixed exit codes: validation/config errors exit 1,
I/O errors exit 2, numerical faults exit 3.
"""


class TnliError(Exception):
    """Base class for all package errors."""


class ConfigError(TnliError):
    """Invalid or unrealizable configuration."""


class OntologyError(TnliError):
    """Ontology file failed to parse or validate."""


class CorpusError(TnliError):
    """Corpus or pair file failed to parse or validate."""


class CheckpointError(TnliError):
    """Checkpoint file is malformed or inconsistent."""


class NumericalError(TnliError):
    """Non-finite value encountered where finite arithmetic is required."""
