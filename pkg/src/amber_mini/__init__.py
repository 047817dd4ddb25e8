"""Desk-scale multilingual encoder training with explicit alignment objectives."""

from .encoder import Encoder, EncoderOutput, MaskRegime, ModelConfig, build_mask, \
    cross_attention
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = ["Encoder", "EncoderOutput", "MaskRegime", "ModelConfig",
           "build_mask", "cross_attention", "Tensor", "no_grad", "__version__"]
