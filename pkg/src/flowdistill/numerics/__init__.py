from .net import NetConfig, Params, VelocityNet, flatten_params, init_params, time_features, unflatten_params
from .optim import AdamWConfig, TrainState, adamw_step, clone, ema_update
from .rng import stream
from .tensor import DTYPE, DualTensor, NumericalError, ShapeError, log_sigmoid, sigmoid, silu

__all__ = [
    "AdamWConfig",
    "DTYPE",
    "DualTensor",
    "NetConfig",
    "NumericalError",
    "Params",
    "ShapeError",
    "TrainState",
    "VelocityNet",
    "adamw_step",
    "clone",
    "ema_update",
    "flatten_params",
    "init_params",
    "log_sigmoid",
    "sigmoid",
    "silu",
    "stream",
    "time_features",
    "unflatten_params",
]
