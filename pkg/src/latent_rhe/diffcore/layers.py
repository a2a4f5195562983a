"""Network primitives: affine, strided convolution, transposed convolution, GRU cell, Gaussians.

Images are ``(batch, channels, height, width)``.  Convolutions use no padding:
a kernel ``k`` with stride ``s`` maps ``n`` to ``(n - k) // s + 1`` and the
transposed convolution maps ``n`` to ``(n - 1) * s + k``.
"""
from __future__ import annotations

import numpy as np

from latent_rhe.diffcore.value import (
    Value,
    _result,
    add,
    as_value,
    concat,
    div,
    log,
    mul,
    sigmoid,
    square,
    sub,
    tanh,
    transpose,
    vsum,
)
from latent_rhe.errors import DomainError, ShapeError


def conv_output_size(n: int, kernel: int, stride: int) -> int:
    return (n - kernel) // stride + 1


def deconv_output_size(n: int, kernel: int, stride: int) -> int:
    return (n - 1) * stride + kernel


def dense(x: Value, weights: Value, bias: Value | None = None) -> Value:
    x, weights = as_value(x), as_value(weights)
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weights {weights.shape}")
    if bias is None:
        return _result(x.data @ weights.data, (x, weights), lambda g: (g @ weights.data.T, x.data.T @ g))
    bias = as_value(bias)
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"dense: bias {bias.shape} does not match output width {weights.shape[1]}")
    out = x.data @ weights.data + bias.data
    return _result(out, (x, weights, bias), lambda g: (g @ weights.data.T, x.data.T @ g, g.sum(axis=0)))


# Convolutions work internally on a channel-major ``(C, H, W, B)`` layout: with
# the batch axis innermost, every strided window copy moves long contiguous
# runs and the matmul results need no transposition.  The ``*_cm`` functions
# expose that layout so stacked layers can stay in it.


def _windows(x: np.ndarray, kernel: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """``(k, k, C, ho, wo, B)`` tensor of every kernel tap over a ``(C, H, W, B)`` image."""
    c, _, _, b = x.shape
    out = np.empty((kernel, kernel, c, ho, wo, b), dtype=x.dtype)
    for i in range(kernel):
        for j in range(kernel):
            out[i, j] = x[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
    return out


def _accumulate(taps: np.ndarray, stride: int, out_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of ``_windows``: sum ``(k, k, C, ho, wo, B)`` taps into ``(C, H, W, B)``."""
    k, _, c, ho, wo, b = taps.shape
    out = np.zeros((c, *out_hw, b), dtype=taps.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += taps[i, j]
    return out


def _check_conv(name: str, x: Value, kernels: Value, stride: int, channel_axis: int) -> None:
    if stride < 1:
        raise ShapeError(f"{name}: stride must be >= 1, got {stride}")
    if x.ndim != 4 or kernels.ndim != 4 or kernels.shape[2] != kernels.shape[3]:
        raise ShapeError(f"{name}: expected 4-d input and square 4-d kernels, got {x.shape}, {kernels.shape}")
    if kernels.shape[channel_axis] != x.shape[0]:
        raise ShapeError(f"{name}: input has {x.shape[0]} channels, kernels expect {kernels.shape[channel_axis]}")


def _check_bias(name: str, bias: Value, channels: int) -> None:
    if bias.shape != (channels,):
        raise ShapeError(f"{name}: bias {bias.shape} does not match {channels} output channels")


def conv2d_cm(x: Value, kernels: Value, bias: Value | None = None, stride: int = 1) -> Value:
    """``conv2d`` on channel-major ``(C, H, W, B)`` input, returning ``(O, Ho, Wo, B)``."""
    x, kernels = as_value(x), as_value(kernels)
    _check_conv("conv2d", x, kernels, stride, 1)
    c, h, w, b = x.shape
    o, _, k, _ = kernels.shape
    if h < k or w < k:
        raise ShapeError(f"conv2d: kernel {k} larger than input {h}x{w}")
    ho, wo = conv_output_size(h, k, stride), conv_output_size(w, k, stride)
    pmat = _windows(x.data, k, stride, ho, wo).reshape(k * k * c, -1)
    wmat = kernels.data.transpose(0, 2, 3, 1).reshape(o, -1)
    out = wmat @ pmat
    if bias is not None:
        bias = as_value(bias)
        _check_bias("conv2d", bias, o)
        out += bias.data[:, None]
    out = out.reshape(o, ho, wo, b)

    def bw(g):
        gmat = g.reshape(o, -1)
        dw = (gmat @ pmat.T).reshape(o, k, k, c).transpose(0, 3, 1, 2)
        dx = None
        if x.requires_grad:
            dx = _accumulate((wmat.T @ gmat).reshape(k, k, c, ho, wo, b), stride, (h, w))
        grads = [dx, np.ascontiguousarray(dw)]
        if bias is not None:
            grads.append(gmat.sum(axis=1))
        return grads

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return _result(out, parents, bw)


def deconv2d_cm(x: Value, kernels: Value, bias: Value | None = None, stride: int = 1) -> Value:
    """``deconv2d`` on channel-major ``(C, H, W, B)`` input, returning ``(O, Ho, Wo, B)``."""
    x, kernels = as_value(x), as_value(kernels)
    _check_conv("deconv2d", x, kernels, stride, 0)
    c, h, w, b = x.shape
    _, o, k, _ = kernels.shape
    ho, wo = deconv_output_size(h, k, stride), deconv_output_size(w, k, stride)
    wmat = kernels.data.transpose(2, 3, 1, 0).reshape(-1, c)  # rows ordered (ki, kj, out_channel)
    xmat = x.data.reshape(c, -1)
    out = _accumulate((wmat @ xmat).reshape(k, k, o, h, w, b), stride, (ho, wo))
    if bias is not None:
        bias = as_value(bias)
        _check_bias("deconv2d", bias, o)
        out += bias.data[:, None, None, None]

    def bw(g):
        gmat = _windows(g, k, stride, h, w).reshape(k * k * o, -1)
        dx = (wmat.T @ gmat).reshape(c, h, w, b) if x.requires_grad else None
        dw = (gmat @ xmat.T).reshape(k, k, o, c).transpose(3, 2, 0, 1)
        grads = [dx, np.ascontiguousarray(dw)]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2, 3)))
        return grads

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return _result(out, parents, bw)


def conv2d(x: Value, kernels: Value, bias: Value | None = None, stride: int = 1) -> Value:
    """Valid cross-correlation of ``(B, C, H, W)`` input; ``kernels`` is ``(out_ch, in_ch, k, k)``."""
    x = as_value(x)
    if x.ndim != 4:
        raise ShapeError(f"conv2d: expected (B,C,H,W) input, got {x.shape}")
    return transpose(conv2d_cm(transpose(x, (1, 2, 3, 0)), kernels, bias, stride), (3, 0, 1, 2))


def deconv2d(x: Value, kernels: Value, bias: Value | None = None, stride: int = 1) -> Value:
    """Transposed convolution of ``(B, C, H, W)`` input; ``kernels`` is ``(in_ch, out_ch, k, k)``."""
    x = as_value(x)
    if x.ndim != 4:
        raise ShapeError(f"deconv2d: expected (B,C,H,W) input, got {x.shape}")
    return transpose(deconv2d_cm(transpose(x, (1, 2, 3, 0)), kernels, bias, stride), (3, 0, 1, 2))


def gated_recurrent_cell(inputs: Value, hidden: Value, params: dict[str, Value]) -> Value:
    """GRU update with gates ordered reset, update, candidate.

    ``params`` holds ``w_ih (I, 3H)``, ``w_hh (H, 3H)``, ``b_ih (3H,)``, ``b_hh (3H,)``.
    """
    inputs, hidden = as_value(inputs), as_value(hidden)
    n = hidden.shape[-1]
    if params["w_hh"].shape != (n, 3 * n):
        raise ShapeError(f"gru: hidden size {n} incompatible with w_hh {params['w_hh'].shape}")
    gi = dense(inputs, params["w_ih"], params["b_ih"])
    gh = dense(hidden, params["w_hh"], params["b_hh"])
    reset = sigmoid(gi[:, :n] + gh[:, :n])
    update = sigmoid(gi[:, n : 2 * n] + gh[:, n : 2 * n])
    cand = tanh(gi[:, 2 * n :] + reset * gh[:, 2 * n :])
    return cand + update * (hidden - cand)


def one_hot(actions: np.ndarray, num_actions: int, dtype=np.float32) -> np.ndarray:
    """One-hot rows; negative indices encode "no action" as the zero vector."""
    actions = np.asarray(actions, dtype=np.int64)
    out = np.zeros((*actions.shape, num_actions), dtype=dtype)
    valid = actions >= 0
    out[valid, actions[valid]] = 1
    return out


def _require_positive(std: Value, what: str) -> None:
    if not np.all(std.data > 0):
        raise DomainError(f"{what}: standard deviation must be strictly positive (min {std.data.min()})")


def gaussian_sample(mean: Value, stddev: Value, noise: np.ndarray) -> Value:
    """Reparameterized draw ``mean + stddev * noise`` with externally supplied standard-normal noise."""
    mean, stddev = as_value(mean), as_value(stddev)
    _require_positive(stddev, "gaussian_sample")
    noise = np.asarray(noise, dtype=mean.dtype)
    if noise.shape != mean.shape or stddev.shape != mean.shape:
        raise ShapeError(f"gaussian_sample: mean {mean.shape}, stddev {stddev.shape}, noise {noise.shape}")
    return add(mean, mul(stddev, Value(noise)))


def gaussian_kl(mean_q: Value, std_q: Value, mean_p: Value, std_p: Value) -> Value:
    """KL(q || p) between diagonal Gaussians, summed over the last axis."""
    mean_q, std_q, mean_p, std_p = (as_value(v) for v in (mean_q, std_q, mean_p, std_p))
    _require_positive(std_q, "gaussian_kl")
    _require_positive(std_p, "gaussian_kl")
    if len({mean_q.shape, std_q.shape, mean_p.shape, std_p.shape}) != 1:
        raise ShapeError("gaussian_kl: all four parameter arrays must share a shape")
    var_p = square(std_p)
    ratio = div(add(square(std_q), square(sub(mean_q, mean_p))), mul(var_p, 2.0))
    per_dim = sub(add(sub(log(std_p), log(std_q)), ratio), 0.5)
    return vsum(per_dim, axis=-1)


__all__ = [
    "concat",
    "conv2d",
    "conv2d_cm",
    "conv_output_size",
    "deconv2d",
    "deconv2d_cm",
    "deconv_output_size",
    "dense",
    "gated_recurrent_cell",
    "gaussian_kl",
    "gaussian_sample",
    "one_hot",
]
