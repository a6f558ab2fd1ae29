"""Hierarchical 1D shifted-window transformer for DNA track prediction.

Everything runs on a small reverse-mode autodiff tape over numpy arrays
(:mod:`genomic_interpreter.autodiff`).
"""

from .autodiff import Rng, Tape, Tensor, backward, grad_check
from .errors import ConfigError, ContractError, DimensionError, FormatError, GenIntError, NumericalError
from .model import InterpreterConfig, InterpreterParams, build, count_madds, forward, make_config
from .swin import Swin1dConfig, swin1d_forward

__version__ = "0.1.0"

__all__ = [
    "Rng", "Tape", "Tensor", "backward", "grad_check",
    "ConfigError", "ContractError", "DimensionError", "FormatError", "GenIntError", "NumericalError",
    "InterpreterConfig", "InterpreterParams", "build", "count_madds", "forward", "make_config",
    "Swin1dConfig", "swin1d_forward",
]
