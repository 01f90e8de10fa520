from .tape import Tape, Node, value_of
from . import tape as ops
from .mlp import MlpParams, mlp_forward, mlp_init
from .conv import ConvNetParams, conv_forward, conv_net_init, bilinear_sample
from .adam import AdamState, adam_step

__all__ = [
    "Tape",
    "Node",
    "value_of",
    "ops",
    "MlpParams",
    "mlp_forward",
    "mlp_init",
    "ConvNetParams",
    "conv_forward",
    "conv_net_init",
    "bilinear_sample",
    "AdamState",
    "adam_step",
]
