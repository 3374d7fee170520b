"""Exception types shared across the package."""


class MMVSegError(Exception):
    """Base class for all package errors."""


class ShapeError(MMVSegError, ValueError):
    """Tensor extents do not satisfy an operation's shape contract."""


class ContractError(MMVSegError, ValueError):
    """An API precondition other than a shape constraint was violated."""


class NumericError(MMVSegError, ArithmeticError):
    """A non-finite value was produced or consumed where finiteness is required."""


class ConfigError(MMVSegError, ValueError):
    """A configuration object is internally inconsistent or unsupported."""


class FormatError(MMVSegError, ValueError):
    """A binary file does not conform to its declared on-disk format."""


class GenerationError(MMVSegError, RuntimeError):
    """Synthetic data generation could not satisfy its constraints."""
