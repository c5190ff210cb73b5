"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(ValueError):
    """A configuration value violates an operation's requirements."""


class ContractError(ValueError):
    """A caller broke an API contract (wrong mode, unsorted input, ...)."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where finite numbers are required."""


class SchemaError(ValueError):
    """The input data does not match the declared schema/roles."""


class IntegrityError(ValueError):
    """A persisted file is corrupt or truncated."""


class UnsupportedVersionError(ValueError):
    """A persisted file was written by a newer format version."""
