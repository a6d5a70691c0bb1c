"""Exception hierarchy. Every error raised on purpose by the package derives
from :class:`HistoTLError` so callers (and the CLI) can catch one type."""


class HistoTLError(Exception):
    pass


class IngestionError(HistoTLError):
    """A manifest file or image referenced by it could not be read."""


class LabelError(HistoTLError):
    pass


class IntegrityError(HistoTLError):
    """Manifest content violates an invariant (duplicates, empty, bad size)."""


class SplitError(HistoTLError):
    pass


class TaskDerivationError(HistoTLError):
    pass


class PreprocessingError(HistoTLError):
    pass


class StreamError(HistoTLError):
    pass


class RegistryError(HistoTLError):
    pass


class WeightLoadError(HistoTLError):
    pass


class CheckpointError(HistoTLError):
    pass


class ConfigurationError(HistoTLError):
    pass


class PredictionError(HistoTLError):
    pass


class MetricInputError(HistoTLError, ValueError):
    pass


class RocUndefinedError(HistoTLError, ValueError):
    pass


class AggregationError(HistoTLError):
    pass
