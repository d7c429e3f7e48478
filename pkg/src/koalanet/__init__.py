"""Blind super-resolution with kernel-oriented adaptive local adjustment.

Submodules:

- ``tensor``, ``ops``, ``gradcheck``: small reverse-mode autodiff over numpy
- ``degrade``: anisotropic Gaussian + bicubic degradation and dataset synthesis
- ``downsampler``, ``upsampler``: the two networks
- ``train``: three-stage training
- ``metrics``: Y-channel PSNR/SSIM and kernel accuracy
- ``cli``: the ``koalanet`` command
"""
from .tensor import Tape, Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = ["Tape", "Tensor", "backward", "no_grad", "__version__"]
