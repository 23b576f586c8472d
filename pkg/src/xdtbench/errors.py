"""Exception hierarchy shared by all xdtbench modules.

The CLI maps these onto exit codes: data-shaped problems (bad manifests,
splits, caches, experiment configs) exit with 2, adapter and runtime
failures with 3, usage errors with 1.
"""


class XdtError(Exception):
    """Base class for all xdtbench failures."""


class DataError(XdtError):
    """Invalid or inconsistent input data."""


class ManifestError(DataError):
    """Manifest file missing, malformed, or self-inconsistent."""


class SplitError(DataError):
    """Split specification or split file cannot be satisfied."""


class CacheError(DataError):
    """Embedding cache file unreadable, corrupt, or wrong version."""


class ConfigError(DataError):
    """Experiment configuration file invalid."""


class AdapterError(XdtError):
    """Encoder adapter failed or returned unusable output."""


class ModelError(XdtError):
    """Head configuration or tensor shapes are invalid."""


class LossError(XdtError):
    """Loss preconditions violated or non-finite loss quantities."""


class TrainError(XdtError):
    """Training cannot start or aborted mid-run."""
