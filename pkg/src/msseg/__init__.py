"""Dense attention segmentation network with its own autodiff core.

The package is organized around seven pieces: a reverse-mode tensor core
(`tensor`), network building blocks (`blocks`), the full model (`model`),
the volume data pipeline (`data`), evaluation metrics (`metrics`), the
training and inference harness (`train`, `checkpoint`), and an argparse
front end (`cli`).
"""

__version__ = "0.1.0"

from .tensor import Graph, Tensor, backward, sgd_step

__all__ = ["Graph", "Tensor", "backward", "sgd_step", "__version__"]
