"""Elevation-guided flood extent segmentation, built from scratch.

Subpackages and modules:
  raster     grid model, FGRD/PPM formats, padding, patching, stitching
  autodiff   minimal reverse-mode engine and gradient checker
  kernels    hot conv/pool kernels (compiled core or numpy fallback)
  model      gated dual-path encoder-decoder
  loss       masked cross-entropy, physics-guided pairwise loss, audits
  terrain    synthetic terrain, flood events, BFS label propagation
  pipeline   training, stitched prediction, evaluation metrics
  cli        the floodseg command-line tool
"""

from .kernels import BACKEND_NAME

__version__ = "0.1.0"

__all__ = ["BACKEND_NAME", "__version__"]
