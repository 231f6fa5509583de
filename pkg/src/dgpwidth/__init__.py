"""Finite-width Deep GPs, their infinite-width GP limits, and exact posterior inference."""

import jax

jax.config.update("jax_enable_x64", True)

__version__ = "0.1.0"

from .kernels import KernelSpec  # noqa: E402
from .deepgp import DeepGpArchitecture, Layer, WhitenedState  # noqa: E402

__all__ = ["KernelSpec", "DeepGpArchitecture", "Layer", "WhitenedState", "__version__"]
