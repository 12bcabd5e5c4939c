"""Exception types shared across the package."""


class UmbraError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(UmbraError):
    """Invalid or inconsistent configuration value."""


class LoadError(UmbraError):
    """A referenced file is missing or cannot be decoded."""


class IntegrityError(UmbraError):
    """Loaded data violates a sample invariant (shape, value range, overlap)."""


class ShapeError(UmbraError):
    """Tensor shape incompatible with an architecture contract."""


class GenerationError(UmbraError):
    """Synthetic generation could not satisfy its constraints."""


class CheckpointError(UmbraError):
    """Checkpoint missing, corrupt, or incompatible with the current config."""
