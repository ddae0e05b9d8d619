"""Exception types shared across the pipeline."""


class RareSynthError(Exception):
    """Base class; ``category`` is the machine-parsable tag printed by the CLI."""

    category = "error"


class InvalidArgument(RareSynthError, ValueError):
    category = "invalid-argument"


class FormatError(RareSynthError, ValueError):
    category = "format-error"


class CheckpointError(RareSynthError, ValueError):
    category = "checkpoint-error"
