from .module import Module
from .layers import (AvgPool, BatchNorm2d, BinaryConv2d, Conv2d, InstaPReLU, InstaTh, Linear,
                     MaxPool, Normalize, RPReLU, RSign, SEGate)
from .blocks import BinaryUnit, BlockSpec, Downsample, build_block
from .models import Model, build_model

__all__ = [
    "Module", "AvgPool", "BatchNorm2d", "BinaryConv2d", "Conv2d", "InstaPReLU", "InstaTh",
    "Linear", "MaxPool", "Normalize", "RPReLU", "RSign", "SEGate", "BinaryUnit", "BlockSpec",
    "Downsample", "build_block", "Model", "build_model",
]
