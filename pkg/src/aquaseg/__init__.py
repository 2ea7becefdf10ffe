"""Water-body segmentation experiments on two-resolution multiband imagery.

A self-contained stack: a small autodiff tensor library, configurable U-Net,
a dual-network model coupling a coarse-resolution stream to a fine one via a
resolution bridge and a consistency loss, plus data pipeline, metrics,
training loops, and a synthetic scene generator for desk-scale reruns.
"""

__version__ = "0.1.0"

from .errors import (AquasegError, BadMagicError, ConfigError, ContractError,
                     FormatError, ShapeError, TruncatedFileError)
from .prng import PrngState
from .tensor import Tensor4, backward, finite_difference_grad, no_grad, reset_graph

__all__ = [
    "AquasegError", "BadMagicError", "ConfigError", "ContractError", "FormatError",
    "ShapeError", "TruncatedFileError", "PrngState", "Tensor4", "backward",
    "finite_difference_grad", "no_grad", "reset_graph", "__version__",
]
