from .optim import AdamWConfig, AdamWState, EmaState, adamw_step, ema_update
from .params import ParamSet
from .random import RandomSource, splitmix64
from .tensor import Tensor, concat, grad, grad_enabled, layer_norm, no_grad, tanh

__all__ = [
    "AdamWConfig",
    "AdamWState",
    "EmaState",
    "ParamSet",
    "RandomSource",
    "Tensor",
    "adamw_step",
    "concat",
    "ema_update",
    "grad",
    "grad_enabled",
    "layer_norm",
    "no_grad",
    "splitmix64",
    "tanh",
]
