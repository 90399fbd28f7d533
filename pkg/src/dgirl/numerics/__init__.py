"""Self-contained differentiable computation core."""

from .checkpoint import checkpoint_bytes, read_checkpoint, write_checkpoint
from .gradcheck import finite_diff_check, well_conditioned_point
from .layers import (attention, gru_cell, gru_encode, gru_stack_step, init_gru, init_mlp,
                     inverted_dropout, mlp_forward)
from .optim import AdamState, adam_step, clip_gradients
from .params import Param, ParamStore
from .tensor import Tensor, backward, log_softmax

__all__ = [
    "AdamState", "Param", "ParamStore", "Tensor", "adam_step", "attention",
    "backward", "checkpoint_bytes", "clip_gradients", "finite_diff_check", "well_conditioned_point",
    "gru_cell", "gru_encode", "gru_stack_step", "init_gru", "init_mlp", "inverted_dropout",
    "log_softmax", "mlp_forward", "read_checkpoint", "write_checkpoint",
]
