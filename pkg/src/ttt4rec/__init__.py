"""TTT4Rec: sequential recommendation with a TTT-Linear feature extractor."""

from .autodiff import Trace, Var, grad_check
from .model import Instance, ModelConfig, ModelParams, init_params
from .ttt import TTTConfig, TTTParams

__version__ = "0.1.0"

__all__ = [
    "Instance",
    "ModelConfig",
    "ModelParams",
    "TTTConfig",
    "TTTParams",
    "Trace",
    "Var",
    "grad_check",
    "init_params",
]
