"""Range-view LiDAR 3D detection: range images, probabilistic box decoding,
binned mean-shift fusion, adaptive NMS, training losses and evaluation."""

from .errors import FormatError, InvalidInputError

__version__ = "0.1.0"

__all__ = ["FormatError", "InvalidInputError", "__version__"]
