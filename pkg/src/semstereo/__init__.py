"""Joint semantic segmentation and stereo disparity at desk scale."""

from ._kernels import BACKEND
from .diffops import Tensor
from .network import SemStereoNet

__version__ = "0.1.0"
__all__ = ["BACKEND", "SemStereoNet", "Tensor", "__version__"]
