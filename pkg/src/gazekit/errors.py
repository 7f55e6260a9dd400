"""Exception types shared across the package."""


class GazekitError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(GazekitError):
    """Operands have incompatible or unsupported shapes/dtypes."""


class MaskError(GazekitError):
    """Invalid mask: empty, wrong ratio, or indivisible geometry."""


class ConfigError(GazekitError):
    """Invalid configuration or model-state precondition."""


class DataError(GazekitError):
    """Malformed dataset, manifest, or image file."""


class WeightFormatError(GazekitError):
    """Weight file violates the binary format (magic, version, dtype code)."""


class WeightCorruptionError(WeightFormatError):
    """Weight file checksum mismatch."""


class LoadMismatchError(GazekitError):
    """Checkpoint does not match the target model (names or shapes)."""


class MissingGradError(GazekitError):
    """Optimizer stepped a trainable parameter that has no gradient."""
