"""Forward and backward passes for every layer in the two networks.

Conventions shared by all layers:

* ``forward`` returns ``(output, state)``; ``state`` carries exactly the
  activations the matching ``backward`` needs and nothing else.
* ``backward`` consumes a state produced by one forward call. Layers are
  pure given (input, parameters, state), so different samples can be
  evaluated concurrently; parameters are mutated only by the optimizer.
* L2 regularization gradients (2 * factor * param) are folded into the
  convolution backward so optimizer updates stay generic. The matching
  penalty term is added to the loss by ``losses.total_loss``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .rng import Rng
from .tensor import DTYPE

KERNEL = 3  # cubic kernel extent on all three spatial axes


def he_normal_init(rng: Rng, shape, fan_in: int, dtype=DTYPE) -> np.ndarray:
    """Draw weights from Normal(0, sqrt(2 / fan_in))."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    std = float(np.sqrt(2.0 / fan_in))
    return rng.normal(0.0, std, size=shape).astype(dtype)


def _expect_rank5(x: np.ndarray, who: str) -> None:
    if x.ndim != 5:
        raise ValueError(f"{who} expects a (N, C, D, H, W) array, got shape {x.shape}")


# ---------------------------------------------------------------------------
# 3D convolution, kernel 3, stride 1, zero-padded "same"
# ---------------------------------------------------------------------------

@dataclass
class Conv3dState:
    x_padded: np.ndarray
    in_shape: tuple


class Conv3d:
    """3x3x3 convolution with per-channel bias and attached L2 factors.

    The bias factor is fixed at 0.01; the weight factor varies per block.
    """

    def __init__(self, in_channels: int, out_channels: int, rng: Rng,
                 l2_weight_factor: float = 0.0, l2_bias_factor: float = 0.01,
                 dtype=DTYPE):
        if l2_weight_factor < 0 or l2_bias_factor < 0:
            raise ValueError("L2 factors must be nonnegative")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.l2_weight_factor = float(l2_weight_factor)
        self.l2_bias_factor = float(l2_bias_factor)
        fan_in = in_channels * KERNEL ** 3
        self.weight = he_normal_init(rng, (out_channels, in_channels, KERNEL, KERNEL, KERNEL),
                                     fan_in, dtype)
        self.bias = np.zeros(out_channels, dtype=dtype)

    def forward(self, x: np.ndarray):
        _expect_rank5(x, "conv3d")
        n, c, d, h, w = x.shape
        if c != self.in_channels:
            raise ValueError(f"conv3d expects {self.in_channels} input channels, got {c}")
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
        y = np.zeros((self.out_channels, n, d, h, w), dtype=x.dtype)
        # One contraction per kernel tap keeps memory at O(input) instead of
        # materializing an im2col buffer 27x the input size.
        for kd in range(KERNEL):
            for kh in range(KERNEL):
                for kw in range(KERNEL):
                    tap = self.weight[:, :, kd, kh, kw]  # (C_out, C_in)
                    sl = xp[:, :, kd:kd + d, kh:kh + h, kw:kw + w]
                    y += np.tensordot(tap, sl, axes=([1], [1]))
        y = np.moveaxis(y, 0, 1)
        y += self.bias.reshape(1, -1, 1, 1, 1)
        return y, Conv3dState(x_padded=xp, in_shape=x.shape)

    def backward(self, grad_y: np.ndarray, state: Optional[Conv3dState]):
        if state is None or not isinstance(state, Conv3dState):
            raise ValueError("conv3d backward called without a matching forward state")
        n, c, d, h, w = state.in_shape
        if grad_y.shape != (n, self.out_channels, d, h, w):
            raise ValueError(f"grad shape {grad_y.shape} does not match forward output")
        xp = state.x_padded
        grad_xp = np.zeros_like(xp)
        grad_w = np.zeros_like(self.weight)
        for kd in range(KERNEL):
            for kh in range(KERNEL):
                for kw in range(KERNEL):
                    sl = xp[:, :, kd:kd + d, kh:kh + h, kw:kw + w]
                    # (N,C_out,D,H,W) x (N,C_in,D,H,W) contracted over N,D,H,W
                    grad_w[:, :, kd, kh, kw] = np.tensordot(
                        grad_y, sl, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
                    tap = self.weight[:, :, kd, kh, kw]
                    grad_xp[:, :, kd:kd + d, kh:kh + h, kw:kw + w] += np.moveaxis(
                        np.tensordot(tap.T, grad_y, axes=([1], [1])), 0, 1)
        grad_x = grad_xp[:, :, 1:-1, 1:-1, 1:-1]
        grad_b = grad_y.sum(axis=(0, 2, 3, 4))
        if self.l2_weight_factor:
            grad_w += (2.0 * self.l2_weight_factor) * self.weight
        if self.l2_bias_factor:
            grad_b = grad_b + (2.0 * self.l2_bias_factor) * self.bias
        return grad_x, grad_w, grad_b

    def l2_penalty(self) -> float:
        return (self.l2_weight_factor * float(np.sum(np.square(self.weight, dtype=np.float64)))
                + self.l2_bias_factor * float(np.sum(np.square(self.bias, dtype=np.float64))))


# ---------------------------------------------------------------------------
# 3D max pooling, non-overlapping windows, floor semantics on odd extents
# ---------------------------------------------------------------------------

@dataclass
class MaxPool3dState:
    in_shape: tuple
    pool: int
    argmax: np.ndarray  # index into the row-major-flattened window


def maxpool3d_forward(x: np.ndarray, pool: int = 2):
    """Stride-``pool`` max over pool^3 windows; odd remainders are dropped."""
    _expect_rank5(x, "maxpool3d")
    n, c, d, h, w = x.shape
    if min(d, h, w) < pool:
        raise ValueError(f"spatial extents {(d, h, w)} too small for pool {pool}")
    do, ho, wo = d // pool, h // pool, w // pool
    xc = x[:, :, :do * pool, :ho * pool, :wo * pool]
    win = xc.reshape(n, c, do, pool, ho, pool, wo, pool)
    # window axes last, flattened in (d, h, w) scan order so argmax ties go
    # to the first element in row-major order
    win = win.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(n, c, do, ho, wo, pool ** 3)
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return y, MaxPool3dState(in_shape=x.shape, pool=pool, argmax=idx)


def maxpool3d_backward(grad_y: np.ndarray, state: Optional[MaxPool3dState]) -> np.ndarray:
    if state is None or not isinstance(state, MaxPool3dState):
        raise ValueError("maxpool3d backward called without a matching forward state")
    n, c, d, h, w = state.in_shape
    p = state.pool
    do, ho, wo = d // p, h // p, w // p
    if grad_y.shape != (n, c, do, ho, wo):
        raise ValueError(f"grad shape {grad_y.shape} does not match pooled output")
    flat = np.zeros((n, c, do, ho, wo, p ** 3), dtype=grad_y.dtype)
    np.put_along_axis(flat, state.argmax[..., None], grad_y[..., None], axis=-1)
    win = flat.reshape(n, c, do, ho, wo, p, p, p).transpose(0, 1, 2, 5, 3, 6, 4, 7)
    grad_x = np.zeros(state.in_shape, dtype=grad_y.dtype)
    grad_x[:, :, :do * p, :ho * p, :wo * p] = win.reshape(n, c, do * p, ho * p, wo * p)
    return grad_x


# ---------------------------------------------------------------------------
# Batch normalization over all axes except channels
# ---------------------------------------------------------------------------

@dataclass
class BatchNormState:
    mode: str  # "train" | "frozen" | "eval"
    x_hat: Optional[np.ndarray]
    inv_std: np.ndarray
    count: int


class BatchNorm3d:
    """Channel-wise batch normalization for (N, C, D, H, W) inputs.

    Training uses batch statistics and updates the running estimates as
    ``running = momentum * running + (1 - momentum) * batch``; inference
    uses the running estimates. A training batch whose per-channel reduce
    count is 1 cannot produce a variance, so it falls back to the running
    statistics (frozen mode): gamma/beta still receive gradients but the
    statistics are treated as constants.
    """

    REDUCE_AXES = (0, 2, 3, 4)

    def __init__(self, channels: int, momentum: float = 0.99, eps: float = 1e-5, dtype=DTYPE):
        self.channels = channels
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def _shape(self, stat: np.ndarray) -> np.ndarray:
        return stat.reshape(1, -1, 1, 1, 1)

    def forward(self, x: np.ndarray, training: bool):
        _expect_rank5(x, "batchnorm")
        if x.shape[1] != self.channels:
            raise ValueError(f"batchnorm expects {self.channels} channels, got {x.shape[1]}")
        n, _, d, h, w = x.shape
        count = n * d * h * w
        if training and count > 1:
            mean = x.mean(axis=self.REDUCE_AXES)
            var = x.var(axis=self.REDUCE_AXES)
            self.running_mean[...] = self.momentum * self.running_mean + (1 - self.momentum) * mean
            self.running_var[...] = self.momentum * self.running_var + (1 - self.momentum) * var
            mode = "train"
        else:
            mean = self.running_mean.astype(x.dtype)
            var = self.running_var.astype(x.dtype)
            mode = "frozen" if training else "eval"
        inv_std = 1.0 / np.sqrt(var + np.asarray(self.eps, dtype=x.dtype))
        x_hat = (x - self._shape(mean)) * self._shape(inv_std)
        y = self._shape(self.gamma.astype(x.dtype)) * x_hat + self._shape(self.beta.astype(x.dtype))
        keep = x_hat if mode != "eval" else None
        return y, BatchNormState(mode=mode, x_hat=keep, inv_std=inv_std, count=count)

    def backward(self, grad_y: np.ndarray, state: Optional[BatchNormState]):
        if state is None or not isinstance(state, BatchNormState):
            raise ValueError("batchnorm backward called without a matching forward state")
        if state.mode == "eval":
            raise ValueError("batchnorm backward requires a training-mode forward state")
        x_hat = state.x_hat
        grad_beta = grad_y.sum(axis=self.REDUCE_AXES)
        grad_gamma = (grad_y * x_hat).sum(axis=self.REDUCE_AXES)
        gamma = self._shape(self.gamma.astype(grad_y.dtype))
        inv_std = self._shape(state.inv_std)
        grad_xhat = grad_y * gamma
        if state.mode == "frozen":
            grad_x = grad_xhat * inv_std
        else:
            m = state.count
            grad_x = (inv_std / m) * (
                m * grad_xhat
                - self._shape(grad_xhat.sum(axis=self.REDUCE_AXES))
                - x_hat * self._shape((grad_xhat * x_hat).sum(axis=self.REDUCE_AXES)))
        return grad_x, grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# Dropout (inverted), ReLU, global average pool
# ---------------------------------------------------------------------------

@dataclass
class DropoutState:
    mask: Optional[np.ndarray]  # None when the layer acted as identity
    scale: float


def dropout_forward(x: np.ndarray, rate: float, rng: Optional[Rng], training: bool):
    """Inverted dropout: survivors are scaled by 1/(1-rate) at train time."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, DropoutState(mask=None, scale=1.0)
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    mask = (rng.uniform(0.0, 1.0, size=x.shape) >= rate).astype(x.dtype)
    scale = 1.0 / (1.0 - rate)
    return x * mask * np.asarray(scale, dtype=x.dtype), DropoutState(mask=mask, scale=scale)


def dropout_backward(grad_y: np.ndarray, state: Optional[DropoutState]) -> np.ndarray:
    if state is None or not isinstance(state, DropoutState):
        raise ValueError("dropout backward called without a matching forward state")
    if state.mask is None:
        return grad_y
    return grad_y * state.mask * np.asarray(state.scale, dtype=grad_y.dtype)


def relu_forward(x: np.ndarray):
    mask = x > 0  # gradient at exactly 0 is defined as 0
    return np.where(mask, x, np.asarray(0, dtype=x.dtype)), mask


def relu_backward(grad_y: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if mask is None:
        raise ValueError("relu backward called without a matching forward state")
    return np.where(mask, grad_y, np.asarray(0, dtype=grad_y.dtype))


def global_avg_pool3d_forward(x: np.ndarray):
    """Mean over (D, H, W) per channel: (N, C, D, H, W) -> (N, C)."""
    _expect_rank5(x, "global_avg_pool3d")
    return x.mean(axis=(2, 3, 4)), x.shape


def global_avg_pool3d_backward(grad_y: np.ndarray, in_shape) -> np.ndarray:
    if in_shape is None:
        raise ValueError("global_avg_pool3d backward called without a forward state")
    n, c, d, h, w = in_shape
    spread = grad_y / np.asarray(d * h * w, dtype=grad_y.dtype)
    return np.broadcast_to(spread[:, :, None, None, None], in_shape).astype(grad_y.dtype, copy=True)


# ---------------------------------------------------------------------------
# Dense layer and softmax
# ---------------------------------------------------------------------------

class Dense:
    """Fully connected layer: y = x @ W + b, He-normal initialized."""

    def __init__(self, fan_in: int, fan_out: int, rng: Rng, dtype=DTYPE):
        self.fan_in = fan_in
        self.fan_out = fan_out
        self.weight = he_normal_init(rng, (fan_in, fan_out), fan_in, dtype)
        self.bias = np.zeros(fan_out, dtype=dtype)

    def forward(self, x: np.ndarray):
        if x.ndim != 2 or x.shape[1] != self.fan_in:
            raise ValueError(f"dense expects (N, {self.fan_in}), got {x.shape}")
        return x @ self.weight + self.bias, x

    def backward(self, grad_y: np.ndarray, state: Optional[np.ndarray]):
        if state is None:
            raise ValueError("dense backward called without a matching forward state")
        x = state
        if grad_y.shape != (x.shape[0], self.fan_out):
            raise ValueError(f"grad shape {grad_y.shape} does not match dense output")
        grad_x = grad_y @ self.weight.T
        grad_w = x.T @ grad_y
        grad_b = grad_y.sum(axis=0)
        return grad_x, grad_w, grad_b


def softmax(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction so huge logits cannot overflow."""
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)
