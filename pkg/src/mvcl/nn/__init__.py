from .checkpoint import checkpoint_load, checkpoint_save
from .layers import (
    AdaptiveAvgPool2d,
    BatchNorm1d,
    Conv2d,
    Flatten,
    L2Normalize,
    Layer,
    Linear,
    MaxPool2d,
    ReLU,
    Sequential,
)
from .model import (
    DEFAULT_ENCODER_PARAMS,
    EncoderConfig,
    ModelState,
    ProjectorConfig,
    build_encoder,
    build_projector,
    preset,
)
from .optim import OptimizerConfig, lr_at, sgd_step, step_state


def encoder_forward(state, plane_id, batch, train=False):
    return state.encode(plane_id, batch, train)


def projector_forward(state, plane_id, y, train=False):
    return state.project(plane_id, y, train)
