"""Lightweight non-local blocks with differentiable architecture search.

The package provides:

- ``tensor``: a small reverse-mode autodiff engine with a multiply-add counter
- ``blocks``: the non-local operator family and the lightweight residual block
- ``cost``: analytic multiply-add accounting and the relaxed expected cost
- ``nas_search``: insert gating, compactness selection, architecture derivation
- ``supernet``: a toy inverted-residual backbone with candidate sites
- ``data`` / ``train``: datasets and the training/evaluation loops
- ``cli``: the ``lightnl`` command-line entry point
"""

from . import blocks, cost, data, nas_search, supernet, tensor, train, verify
from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = [
    "blocks",
    "cost",
    "data",
    "nas_search",
    "supernet",
    "tensor",
    "train",
    "verify",
    "KERNEL_BACKEND",
    "__version__",
]
