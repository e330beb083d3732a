"""Exception taxonomy shared by all modules.

Exit-code mapping in the CLI: ConfigError -> 2, everything else -> 1.
"""


class CaformerError(Exception):
    """Base class for all package errors."""


class DimensionError(CaformerError):
    """Operand shapes are incompatible for the requested operation."""


class UsageError(CaformerError):
    """An API was called outside its contract (e.g. backward on a non-scalar)."""


class ContractError(CaformerError):
    """An internal cross-module invariant was violated (e.g. modality shape divergence)."""


class ConfigError(CaformerError):
    """A configuration value is invalid or inconsistent."""
