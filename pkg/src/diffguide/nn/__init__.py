from . import functional
from .functional import Conv2dSpec
from .layers import BatchNorm2d, Conv2d, ConvNormAct, LayerNorm2d, Linear
from .module import Module, ModuleList, Parameter, init_parameters

__all__ = [
    "functional",
    "Conv2dSpec",
    "BatchNorm2d",
    "Conv2d",
    "ConvNormAct",
    "LayerNorm2d",
    "Linear",
    "Module",
    "ModuleList",
    "Parameter",
    "init_parameters",
]
