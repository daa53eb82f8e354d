from .layers import (Array, Conv2d, Dense, Flatten, Layer, Param, ReLU, ResidualBlock,
                     Sequential, Tanh, kaiming_uniform, mlp, rff_embed, rff_frequencies)
from .optim import Adam, LRSchedule, TrainingDiverged, cosine_lr
from .gradcheck import gradient_check
from .checkpoint import (CheckpointError, load_params, params_sha256, read_params,
                         save_params)

__all__ = [
    "Array", "Conv2d", "Dense", "Flatten", "Layer", "Param", "ReLU", "ResidualBlock",
    "Sequential", "Tanh", "kaiming_uniform", "mlp", "rff_embed", "rff_frequencies",
    "Adam", "LRSchedule", "TrainingDiverged", "cosine_lr", "gradient_check",
    "CheckpointError", "load_params", "params_sha256", "read_params", "save_params",
]
