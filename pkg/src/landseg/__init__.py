"""From-scratch numpy U-Net for landform segmentation, with binary-hash image retrieval."""

from .unet import UNetConfig, UNetModel, backward, build_unet, encode_bottleneck, forward

__all__ = ["UNetConfig", "UNetModel", "backward", "build_unet", "encode_bottleneck", "forward"]
__version__ = "0.1.0"
