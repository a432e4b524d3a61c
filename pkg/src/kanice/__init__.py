"""Convolutional networks with Kolmogorov-Arnold heads, in numpy."""
from .models import ModelSpec, build, count_parameters
from .tensor import Tape, Tensor

__version__ = "0.1.0"

__all__ = ["ModelSpec", "Tape", "Tensor", "build", "count_parameters"]
