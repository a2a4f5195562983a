"""Minimal reverse-mode differentiation over numpy arrays."""
from latent_rhe.diffcore.checkpoint import load_checkpoint, save_checkpoint
from latent_rhe.diffcore.layers import (
    conv2d,
    conv2d_cm,
    conv_output_size,
    deconv2d,
    deconv2d_cm,
    deconv_output_size,
    dense,
    gated_recurrent_cell,
    gaussian_kl,
    gaussian_sample,
    one_hot,
)
from latent_rhe.diffcore.optim import AdamState, adam_step, clip_grad_norm, global_norm
from latent_rhe.diffcore.value import (
    Value,
    concat,
    exp,
    grad_enabled,
    log,
    maximum,
    no_grad,
    relu,
    reshape,
    sigmoid,
    softplus,
    square,
    stack,
    tanh,
    transpose,
)

__all__ = [
    "AdamState",
    "Value",
    "adam_step",
    "clip_grad_norm",
    "concat",
    "conv2d",
    "conv2d_cm",
    "conv_output_size",
    "deconv2d",
    "deconv2d_cm",
    "deconv_output_size",
    "dense",
    "exp",
    "gated_recurrent_cell",
    "gaussian_kl",
    "gaussian_sample",
    "global_norm",
    "grad_enabled",
    "load_checkpoint",
    "log",
    "maximum",
    "no_grad",
    "one_hot",
    "relu",
    "reshape",
    "save_checkpoint",
    "sigmoid",
    "softplus",
    "square",
    "stack",
    "tanh",
    "transpose",
]
