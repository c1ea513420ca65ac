"""
Exception types raised across the CAM package
"""
from typing import List, Optional


class CamError(Exception):
    """Base class for all errors raised by this package"""


class ShapeError(CamError, ValueError):
    """Array widths or layer shapes do not chain"""


class ContractError(CamError, ValueError):
    """A caller broke an operation's precondition"""


class NumericError(CamError, ArithmeticError):
    """A non-finite value or a numerical procedure that failed to converge"""


class DensityError(CamError, RuntimeError):
    """Entities could not be placed without overlap"""


class ConfigError(CamError, ValueError):
    """Invalid configuration; carries every field-level problem found"""

    def __init__(self, problems: List[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration: " + "; ".join(self.problems))


class CheckpointError(CamError, OSError):
    """A checkpoint file could not be written or read back intact"""


class TrainingDiverged(NumericError):
    """The training loss became non-finite"""

    def __init__(self, message: str, checkpoint_path: Optional[str] = None):
        self.checkpoint_path = checkpoint_path
        super().__init__(message)
