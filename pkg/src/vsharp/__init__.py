"""vSHARP: unrolled half-quadratic variable splitting for parallel MRI reconstruction."""

from vsharp.masks import SamplingMask, make_mask
from vsharp.solver import ModelConfig, SolverConfig, VSharpNet, reconstruct

__all__ = ["ModelConfig", "SamplingMask", "SolverConfig", "VSharpNet", "make_mask", "reconstruct"]
__version__ = "0.1.0"
