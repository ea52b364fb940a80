"""Neural network layers and losses on top of the autodiff tensors.

Spatial operations accept a single image ``[C,H,W]`` or a batch
``[B,C,H,W]``; vectors may be ``[n]`` or batched ``[B,n]``. Convolution is
cross-correlation (no kernel flip). Binary cross-entropy exists in two
forms: a probability-space version with clamping, and a logit-space
version that stays finite for logits far outside the sigmoid's useful
range.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import BatchError, ShapeError
from .tensor import Tensor, record, _sigmoid

BCE_EPS = 1e-7


@dataclass
class Conv2dParams:
    weights: Tensor          # [C_out, C_in, k_h, k_w]
    bias: Optional[Tensor]   # [C_out]
    stride: int = 1
    padding: int = 0


@dataclass
class BatchNormParams:
    gamma: Tensor            # [C]
    beta: Tensor             # [C]
    running_mean: Tensor     # [C], updated in train mode
    running_var: Tensor      # [C]
    momentum: float = 0.9    # weight of the old running statistic
    epsilon: float = 1e-5


@dataclass
class LinearParams:
    weights: Tensor          # [out, in]
    bias: Optional[Tensor]   # [out]


def _as_batched(x: Tensor, rank: int):
    """View data as rank-`rank` with a leading batch axis; report if added."""
    if x.ndim == rank:
        return x.data, False
    if x.ndim == rank - 1:
        return x.data[None], True
    raise ShapeError(f"expected rank {rank - 1} or {rank}, got shape {x.shape}")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """Strided cross-correlation with symmetric zero padding."""
    data, squeezed = _as_batched(x, 4)
    b, c_in, h, w = data.shape
    c_out, c_in_w, kh, kw = p.weights.shape
    if c_in != c_in_w:
        raise ShapeError(f"input has {c_in} channels, kernel expects {c_in_w}")
    s, pad = p.stride, p.padding
    ho = conv_output_size(h, kh, s, pad)
    wo = conv_output_size(w, kw, s, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})")

    padded = np.pad(data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else data
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::s, ::s]                       # [B,C,ho,wo,kh,kw]
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(b, c_in * kh * kw, ho * wo)
    w2 = p.weights.data.reshape(c_out, c_in * kh * kw)
    out = np.matmul(w2, cols).reshape(b, c_out, ho, wo)
    if p.bias is not None:
        out += p.bias.data[None, :, None, None]

    hp, wp = padded.shape[2], padded.shape[3]

    def bwd(og):
        og4 = og.reshape(b, c_out, ho * wo)
        d_w = np.einsum("bop,bkp->ok", og4, cols).reshape(p.weights.shape)
        d_b = og4.sum(axis=(0, 2)) if p.bias is not None else None
        d_cols = np.matmul(w2.T, og4).reshape(b, c_in, kh, kw, ho, wo)
        d_padded = np.zeros((b, c_in, hp, wp))
        for i in range(kh):
            for j in range(kw):
                d_padded[:, :, i:i + s * ho:s, j:j + s * wo:s] += d_cols[:, :, i, j]
        d_x = d_padded[:, :, pad:hp - pad, pad:wp - pad] if pad else d_padded
        if squeezed:
            d_x = d_x[0]
        return d_x, d_w, d_b

    if squeezed:
        out = out[0]
    return record(out, [x, p.weights, p.bias], bwd)


def unpool(x: Tensor, k: int) -> Tensor:
    """Upsize by k: each value lands in the top-left corner of its k x k block."""
    if k < 1:
        raise ShapeError(f"unpool factor must be >= 1, got {k}")
    data, squeezed = _as_batched(x, 4)
    b, c, h, w = data.shape
    out = np.zeros((b, c, h * k, w * k))
    out[:, :, ::k, ::k] = data

    def bwd(og):
        og = og[None] if squeezed else og
        d_x = og[:, :, ::k, ::k].copy()
        return (d_x[0] if squeezed else d_x,)

    if squeezed:
        out = out[0]
    return record(out, [x], bwd)


def batchnorm(x: Tensor, p: BatchNormParams, mode: str = "train") -> Tensor:
    """Per-channel normalization: batch statistics in train mode (updating
    the running averages), running statistics in infer mode."""
    if mode not in ("train", "infer"):
        raise ShapeError(f"unknown batchnorm mode {mode!r}")
    data = x.data
    if data.ndim not in (2, 4):
        raise ShapeError(f"batchnorm expects [B,C] or [B,C,H,W], got {x.shape}")
    c = data.shape[1]
    if p.gamma.shape != (c,):
        raise ShapeError(f"gamma has shape {p.gamma.shape}, input has {c} channels")
    axes = (0,) if data.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if data.ndim == 2 else (1, c, 1, 1)
    gamma = p.gamma.data.reshape(bshape)
    beta = p.beta.data.reshape(bshape)

    if mode == "train":
        if data.shape[0] < 2:
            raise BatchError("train-mode batchnorm needs batch size >= 2")
        mean = data.mean(axis=axes, keepdims=True)
        var = data.var(axis=axes, keepdims=True)
        istd = 1.0 / np.sqrt(var + p.epsilon)
        xhat = (data - mean) * istd
        m = p.momentum
        p.running_mean.data = m * p.running_mean.data + (1 - m) * mean.reshape(c)
        p.running_var.data = m * p.running_var.data + (1 - m) * var.reshape(c)
        n = data.size // c

        def bwd(og):
            d_gamma = (og * xhat).sum(axis=axes)
            d_beta = og.sum(axis=axes)
            d_xhat = og * gamma
            d_x = istd * (
                d_xhat
                - d_xhat.mean(axis=axes, keepdims=True)
                - xhat * (d_xhat * xhat).sum(axis=axes, keepdims=True) / n
            )
            return d_x, d_gamma, d_beta

    else:
        rmean = p.running_mean.data.reshape(bshape)
        istd = 1.0 / np.sqrt(p.running_var.data.reshape(bshape) + p.epsilon)
        xhat = (data - rmean) * istd

        def bwd(og):
            d_gamma = (og * xhat).sum(axis=axes)
            d_beta = og.sum(axis=axes)
            return og * gamma * istd, d_gamma, d_beta

    out = gamma * xhat + beta
    return record(out, [x, p.gamma, p.beta], bwd)


def linear(x: Tensor, p: LinearParams) -> Tensor:
    """Affine map weights @ x + bias for a vector or a batch of vectors."""
    out_dim, in_dim = p.weights.shape
    w = p.weights.data
    if x.ndim == 1:
        if x.shape[0] != in_dim:
            raise ShapeError(f"input has {x.shape[0]} features, weights expect {in_dim}")
        out = w @ x.data
        if p.bias is not None:
            out = out + p.bias.data
        x_data = x.data

        def bwd(og):
            d_b = og if p.bias is not None else None
            return w.T @ og, np.outer(og, x_data), d_b

    elif x.ndim == 2:
        if x.shape[1] != in_dim:
            raise ShapeError(f"input has {x.shape[1]} features, weights expect {in_dim}")
        out = x.data @ w.T
        if p.bias is not None:
            out = out + p.bias.data[None]
        x_data = x.data

        def bwd(og):
            d_b = og.sum(axis=0) if p.bias is not None else None
            return og @ w, og.T @ x_data, d_b

    else:
        raise ShapeError(f"linear expects a vector or batch of vectors, got {x.shape}")
    return record(out, [x, p.weights, p.bias], bwd)


def _check_same_shape(pred: Tensor, target) -> np.ndarray:
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != t.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {t.shape}")
    return t


def bce_loss(pred: Tensor, target) -> Tensor:
    """Mean binary cross-entropy over all elements; pred is clamped to
    [BCE_EPS, 1-BCE_EPS] and the clamp blocks gradient outside it."""
    g = _check_same_shape(pred, target)
    s = np.clip(pred.data, BCE_EPS, 1.0 - BCE_EPS)
    loss = -(g * np.log(s) + (1.0 - g) * np.log1p(-s)).mean()
    inside = (pred.data >= BCE_EPS) & (pred.data <= 1.0 - BCE_EPS)
    n = pred.size

    def bwd(og):
        d = (s - g) / (s * (1.0 - s) * n)
        return (og.reshape(-1)[0] * d * inside,)

    return record(np.array([loss]), [pred], bwd)


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Numerically stable BCE computed from raw logits; finite for any
    logit magnitude."""
    g = _check_same_shape(logits, target)
    r = logits.data
    softplus_r = np.maximum(r, 0.0) + np.log1p(np.exp(-np.abs(r)))
    loss = (g * (softplus_r - r) + (1.0 - g) * softplus_r).mean()
    n = logits.size

    def bwd(og):
        return (og.reshape(-1)[0] * (_sigmoid(r) - g) / n,)

    return record(np.array([loss]), [logits], bwd)
