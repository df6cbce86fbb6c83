"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit with 2,
runtime and numeric problems with 3.
"""


class RoadAdaptError(Exception):
    """Base class for all package errors."""


class ConfigError(RoadAdaptError):
    """Invalid configuration, option value, or incompatible shapes/settings."""


class DataError(RoadAdaptError):
    """Missing or malformed on-disk data."""


class LabelAccessError(RoadAdaptError):
    """Attempt to read labels from a split whose labels are withheld."""


class NumericError(RoadAdaptError):
    """Non-finite or out-of-range values where finite values are required."""


class GenerationError(RoadAdaptError):
    """Scene parameters describe a scene that cannot be rendered."""


class ModalityGuardError(RoadAdaptError):
    """Feature routed to a component that does not accept its modality."""


class StateError(RoadAdaptError):
    """Operation invoked in a training state that does not support it."""
