"""Error taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError/DimensionError are usage
errors (exit 1), NumericError is a numeric failure (exit 2).
"""


class DimensionError(ValueError):
    """Shapes or dimensions are incompatible with the requested operation."""


class ConfigError(ValueError):
    """A configuration value is missing, malformed, or out of range."""


class ContractError(RuntimeError):
    """A caller violated an API precondition that is not a shape/config issue."""


class NumericError(ArithmeticError):
    """A computation produced NaN/Inf or otherwise left the finite domain."""


class TransplantError(RuntimeError):
    """Teacher parameters cannot be copied into the student as requested."""
