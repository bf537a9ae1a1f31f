"""Exception hierarchy shared across the package.

Every error carries a short machine-parsable ``code`` so the CLI can emit a
single-line ``error: <code>: <message>`` diagnostic and exit non-zero.
"""

from __future__ import annotations


class KgeError(Exception):
    """Base class for all package errors."""

    code = "internal"


class ConfigError(KgeError):
    """Invalid configuration key, value, or cross-field combination."""

    code = "config"


class IngestError(KgeError):
    """Malformed dataset file (bad magic, truncated record, id out of range)."""

    code = "ingest"


class FabricError(KgeError):
    """Collective called with mismatched buffer or chunk shapes."""

    code = "fabric"


class PlanError(KgeError):
    """Micro-batch plan incompatible with the partition or worker layout."""

    code = "plan"


class CheckpointError(KgeError):
    """Unreadable checkpoint or checkpoint/config mismatch."""

    code = "checkpoint"


class PredictionFormatError(KgeError):
    """Malformed predictions or queries file."""

    code = "predictions"


class EnsembleError(KgeError):
    """Prediction sets that cannot be fused (e.g. query coverage mismatch)."""

    code = "ensemble"
