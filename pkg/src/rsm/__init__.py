"""Omnidirectional selective-scan models for dense raster prediction.

The package bundles a minimal autodiff tensor engine, grid scan orderings,
the selective state-space kernel, segmentation/change-detection models, a
raster data pipeline with tiling, a training harness, and an analytic
cost profiler. See README.md for the CLI workflows.
"""

from .tensor import Tensor, backward, checked_mode, set_checked

__all__ = ["Tensor", "backward", "checked_mode", "set_checked"]
__version__ = "0.1.0"
