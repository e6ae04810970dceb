"""Tensor engine, reverse-mode autodiff, AdamW and the learning-rate schedule."""
from .functional import (add_constant, cross_entropy, dropout, embedding, layer_norm, log_softmax,
                         nll_from_probs, softmax, weighted_sum)
from .optim import AdamW, LrSchedule, OptimizerState, adamw_step, lr_at
from .tensor import (Parameter, Tensor, concat, default_dtype, exp, gelu, get_default_dtype, log,
                     matmul, no_grad, relu, stack, tanh)

__all__ = [
    "AdamW", "LrSchedule", "OptimizerState", "Parameter", "Tensor", "adamw_step", "add_constant",
    "concat", "cross_entropy", "default_dtype", "dropout", "embedding", "exp", "gelu",
    "get_default_dtype", "layer_norm", "log", "log_softmax", "lr_at", "matmul", "nll_from_probs",
    "no_grad", "relu", "softmax", "stack", "tanh", "weighted_sum",
]
