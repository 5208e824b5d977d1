"""Convolutional neural operators with few-shot transfer to shifted PDE data."""

import torch

from .fields import fourier_resample, load_tensor, relative_l1, save_tensor

# training runs are compared bit for bit; a fixed thread count keeps reductions stable
torch.set_num_threads(1)

__version__ = "0.1.0"

__all__ = ["fourier_resample", "load_tensor", "relative_l1", "save_tensor", "__version__"]
