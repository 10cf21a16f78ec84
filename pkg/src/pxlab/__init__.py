"""pxlab: a desk-scale laboratory for spectral foresight pruning.

Implements the Path eXclusion saliency and pruning loop, the usual
pruning-at-initialization baselines, exact Fixed-Weight-NTK analysis, and
an exhaustive path-enumeration oracle that certifies the NTK-trace bound on
small ReLU networks.
"""

from . import autodiff, datasets, model, ntk, path_oracle, pruning, tensor, train

__all__ = ["autodiff", "datasets", "model", "ntk", "path_oracle", "pruning",
           "tensor", "train"]
__version__ = "0.1.0"
