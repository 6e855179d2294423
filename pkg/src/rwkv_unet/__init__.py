"""RWKV-UNet: U-shaped segmentation network with bidirectional WKV token mixing, in numpy."""

from .model import ModelVariant, SegmentationModel, build, forward
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = ["ModelVariant", "SegmentationModel", "Tensor", "backward", "build", "forward", "no_grad"]
