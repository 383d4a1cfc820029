from .checkpoint import load_model, params_digest, save_model
from .gradcheck import grad_check
from .model import (
    ModelConfig,
    RacnetModel,
    encode_slices,
    forward,
    gru_forward,
    loss_and_grad,
    predict_batch,
)
from .optim import AdamState, adam_step
from .train import train

__all__ = [
    "AdamState",
    "ModelConfig",
    "RacnetModel",
    "adam_step",
    "encode_slices",
    "forward",
    "grad_check",
    "gru_forward",
    "load_model",
    "loss_and_grad",
    "params_digest",
    "predict_batch",
    "save_model",
    "train",
]
