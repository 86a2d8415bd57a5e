"""Histopathology classification: per-class landmark-Isomap embeddings,
perceptual hash signatures, DCA fusion and a stacked sparse autoencoder."""

from ._kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
