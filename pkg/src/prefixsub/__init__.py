"""Subspace learning of prefix-tuning parameters on a small frozen transformer encoder."""

from .errors import ContractError, InputError, PrefixSubError, RefusalError, ShapeError

__version__ = "0.1.0"

__all__ = ["ContractError", "InputError", "PrefixSubError", "RefusalError", "ShapeError", "__version__"]
