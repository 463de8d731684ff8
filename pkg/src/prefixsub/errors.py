"""Exception types shared across the package."""


class PrefixSubError(Exception):
    """Base class for all package errors."""


class ShapeError(PrefixSubError, ValueError):
    """Operand shapes are incompatible."""


class InputError(PrefixSubError, ValueError):
    """Invalid user-supplied data or arguments."""


class ContractError(PrefixSubError, RuntimeError):
    """An operation was called in a state that violates its precondition."""


class RefusalError(PrefixSubError):
    """Refusing to overwrite existing artifacts without an explicit force flag."""
