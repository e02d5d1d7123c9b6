"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class ShapeError(ValueError):
    """Array shape does not match the declared contract."""


class MissingModalityError(ValueError):
    """An operation that requires complete modalities received an incomplete sample."""


class MissingPrerequisiteError(RuntimeError):
    """A pipeline stage was requested before its prerequisite artifacts exist (CLI exit code 3)."""
