"""Group-wise co-saliency detection with a from-scratch numpy network."""
from .net import NetConfig, ParamStore, forward_group, init_params, predict
from .train import DivergenceError, TrainConfig, fit

__all__ = [
    "DivergenceError",
    "NetConfig",
    "ParamStore",
    "TrainConfig",
    "fit",
    "forward_group",
    "init_params",
    "predict",
]
