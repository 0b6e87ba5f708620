"""Exception hierarchy shared across the pipeline.

ConfigError maps to CLI exit code 1, everything else derived from
MammopatchError maps to exit code 2.
"""


class MammopatchError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(MammopatchError):
    """Invalid configuration: bad ratios, unknown model/backbone, malformed config file."""


class InputError(MammopatchError):
    """Invalid runtime input: shape mismatch, out-of-range argument, empty split."""


class IngestError(MammopatchError):
    """Manifest or image ingestion failure; message names the offending record or column."""


class SpecError(MammopatchError):
    """Inconsistent model specification (e.g. non-integral pooled dimension)."""


class WeightsUnavailableError(MammopatchError):
    """Pretrained weights were requested but no weight source is registered."""


class TrainingDivergedError(MammopatchError):
    """Loss became non-finite during training."""
