"""
Exception hierarchy shared by the codec, networks, trainer and service
"""

from typing import Optional


class TGJARError(Exception):
    """Base class for every error raised by this package"""


class ShapeError(TGJARError, ValueError):
    """Tensor or image dimensions do not satisfy an operation's contract"""


class DomainError(TGJARError, ValueError):
    """Argument outside its valid domain (quality factor, empty caption, unknown id)"""


class NumericError(TGJARError, ArithmeticError):
    """Non-finite value encountered in a loss, activation or gradient"""

    def __init__(self, message: str, component: Optional[str] = None,
                 step: Optional[int] = None, parameter: Optional[str] = None):
        details = []
        if component:
            details.append(f"component={component}")
        if parameter:
            details.append(f"parameter={parameter}")
        if step is not None:
            details.append(f"step={step}")
        if details:
            message = f"{message} ({', '.join(details)})"
        super().__init__(message)
        self.component = component
        self.step = step
        self.parameter = parameter


class ConfigMismatchError(TGJARError):
    """Checkpoint was produced under a different model configuration"""


class DatasetError(TGJARError):
    """Dataset directory is missing, empty or inconsistent"""


class CheckpointError(TGJARError):
    """Checkpoint container cannot be read or written"""
