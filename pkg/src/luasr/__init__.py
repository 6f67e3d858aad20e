"""Latent-space super-resolution at desk scale.

A windowed-attention latent upscaler with multi-scale pixel-shuffle heads,
a frozen toy codec standing in for a VAE, signal-processing loss kernels,
a three-stage training curriculum, and an efficiency benchmark harness.
"""

from luasr.tensor import Tensor, ShapeError, backward, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "ShapeError", "backward", "no_grad", "__version__"]
