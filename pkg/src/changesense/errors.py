"""Shared error types for contract violations across the package."""


class ChangeSenseError(Exception):
    """Base class for all package-level contract violations."""


class InputError(ChangeSenseError):
    """Caller-supplied data violates an operation precondition."""


class ConfigError(ChangeSenseError):
    """Configured dimensions or switches are inconsistent."""


class GeometryError(ChangeSenseError):
    """A point/box prompt falls outside the image bounds."""


class CapacityError(ChangeSenseError):
    """A sequence exceeds the configured maximum length."""


class FreezingViolation(ChangeSenseError):
    """A parameter in the frozen set received a gradient or changed value."""


class GenerationError(ChangeSenseError):
    """Synthetic scene generation could not satisfy its constraints."""
