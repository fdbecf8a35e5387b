"""
Error types for the SCGA engine
"""
from typing import Optional


class SCGAError(Exception):
    """Base class for every error raised by the package"""


class ShapeError(SCGAError, ValueError):
    """Operand extents do not agree"""


class ContractError(SCGAError, ValueError):
    """A precondition of an operation was violated"""


class BoundsError(SCGAError, IndexError):
    """Slice or index outside the valid range"""


class NumericError(SCGAError, ArithmeticError):
    """Non-finite values, divergence, or a failed gradient check"""


class ConfigError(SCGAError, ValueError):
    """Invalid configuration value"""


class DatasetError(SCGAError, ValueError):
    """Malformed dataset record"""

    def __init__(self, message: str, line: Optional[int] = None, field: Optional[str] = None):
        self.line = line
        self.field = field
        location = f"line {line}: " if line is not None else ""
        super().__init__(f"{location}{message}")
