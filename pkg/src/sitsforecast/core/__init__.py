"""Dense float64 tensor ops with explicit backward kernels, AdamW and gradient checking."""

from .gradcheck import GradCheckReport, finite_diff_check, relative_error
from .kernels import BACKEND
from .ops import (
    activate,
    add,
    attention_apply,
    avgpool2,
    broadcast_to,
    concat,
    conv2d_apply,
    conv3d_apply,
    dense_apply,
    dropout,
    gelu,
    layernorm,
    linear,
    matmul,
    mean,
    mse,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    sigmoid_array,
    silu,
    softmax,
    sub,
    sum_all,
    take,
    transpose,
    upsample2,
)
from .optim import adamw_step, clip_grad_norm, cosine_lr
from .params import FROZEN, PARTITIONS, PRETRAIN, SEMANTIC_TEMPORAL, STRUCTURAL, ParamStore
from .tape import Tape, Var, as_var

__all__ = [name for name in dir() if not name.startswith("_")]
