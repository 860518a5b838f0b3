"""Exception hierarchy shared by all fedsim modules."""


class FedsimError(Exception):
    """Base class for all errors raised by fedsim."""


class ConfigError(FedsimError):
    """Invalid configuration: bad key, bad type, or violated constraint."""


class ShapeError(FedsimError):
    """Array dimensions do not match the model architecture."""


class DataError(FedsimError):
    """Malformed or inconsistent dataset input."""


class PartitionError(FedsimError):
    """A client partition could not be produced under the given settings."""


class AggregationError(FedsimError):
    """Model aggregation received inconsistent inputs."""


class EvaluationError(FedsimError):
    """Model evaluation was requested on unusable data."""


class StateError(FedsimError):
    """A runtime value left its documented domain."""


class DivergenceError(FedsimError):
    """Local training produced a non-finite loss."""


class DiagnosticsError(FedsimError):
    """A diagnostic was requested without the instrumentation it needs."""
