"""
Operators and losses used by the segmenter and the domain discriminator.

All image tensors are laid out as (N, C, H, W). Convolution is cross-correlation (no kernel flip).
"""
import logging
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from dannseg.error import DannSegError, ErrorCode
from dannseg.tensor import Function, Tensor
from dannseg.util import is_one_hot

logger = logging.getLogger(__name__)

PROB_EPS = 1e-12
DICE_EPS = 1e-6


def _shape_error(message: str) -> DannSegError:
    return DannSegError(ErrorCode.SHAPE_MISMATCH, message)


class RunningStats:
    """Per-channel running mean and variance of one batch-norm layer."""

    def __init__(self, mean: np.ndarray, var: np.ndarray):
        self.mean = mean
        self.var = var

    @classmethod
    def initial(cls, channels: int, dtype=np.float32) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))

    def copy(self) -> "RunningStats":
        return RunningStats(self.mean.copy(), self.var.copy())


class Conv2d(Function):
    def forward(self, x, kernel, bias, stride=1, padding="same"):
        if x.ndim != 4 or kernel.ndim != 4:
            raise _shape_error(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
        n, c, h, w = x.shape
        f, kc, kh, kw = kernel.shape
        if kh != kw or kh % 2 == 0:
            raise _shape_error(f"conv2d kernel must be square with odd size, got {kh}x{kw}")
        if kc != c:
            raise _shape_error(f"conv2d kernel expects {kc} input channels, input has {c}")
        if bias.shape != (f,):
            raise _shape_error(f"conv2d bias must have shape ({f},), got {bias.shape}")
        if padding not in ("same", "valid"):
            raise _shape_error(f"conv2d padding must be 'same' or 'valid', got {padding!r}")
        if stride < 1:
            raise _shape_error(f"conv2d stride must be positive, got {stride}")

        pad = kh // 2 if padding == "same" else 0
        out_h = (h + 2 * pad - kh) // stride + 1
        out_w = (w + 2 * pad - kw) // stride + 1
        if out_h < 1 or out_w < 1:
            raise _shape_error(f"conv2d input {h}x{w} too small for a {kh}x{kw} kernel with padding={padding}")

        padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :out_h, :out_w]
        out = np.tensordot(windows, kernel, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        out = out + bias[None, :, None, None]

        self.windows = windows
        self.kernel = kernel
        self.padded_shape = padded.shape
        self.in_shape = x.shape
        self.stride, self.pad, self.out_h, self.out_w = stride, pad, out_h, out_w
        return np.ascontiguousarray(out)

    def backward(self, grad):
        k = self.kernel.shape[2]
        s, pad = self.stride, self.pad
        d_kernel = np.tensordot(grad, self.windows, axes=([0, 2, 3], [0, 2, 3]))
        d_bias = grad.sum(axis=(0, 2, 3))

        d_padded = np.zeros(self.padded_shape, dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                contribution = np.tensordot(grad, self.kernel[:, :, i, j], axes=([1], [0]))
                d_padded[:, :, i:i + s * self.out_h:s, j:j + s * self.out_w:s] += contribution.transpose(0, 3, 1, 2)
        h, w = self.in_shape[2], self.in_shape[3]
        d_x = d_padded[:, :, pad:pad + h, pad:pad + w]
        return d_x, d_kernel, d_bias


class BatchNorm2d(Function):
    def forward(self, x, gamma, beta, running=None, mode="train", momentum=0.9, eps=1e-5, update_stats=True):
        if x.ndim != 4:
            raise _shape_error(f"batchnorm2d expects 4-D input, got {x.shape}")
        n, c, h, w = x.shape
        if gamma.shape != (c,) or beta.shape != (c,):
            raise _shape_error(f"batchnorm2d affine parameters must have shape ({c},)")

        if mode == "train":
            if n * h * w < 2:
                raise DannSegError(
                    ErrorCode.DEGENERATE_VARIANCE,
                    f"batchnorm2d in train mode needs N*H*W >= 2, got {n}*{h}*{w}",
                )
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            if update_stats and running is not None:
                running.mean = (momentum * running.mean + (1 - momentum) * mean).astype(running.mean.dtype)
                running.var = (momentum * running.var + (1 - momentum) * var).astype(running.var.dtype)
        elif mode == "eval":
            if running is None:
                raise DannSegError(ErrorCode.INVALID_CONFIG, "batchnorm2d eval mode needs running statistics")
            mean, var = running.mean, running.var
        else:
            raise DannSegError(ErrorCode.INVALID_CONFIG, f"unknown batchnorm mode {mode!r}")

        inv_std = 1.0 / np.sqrt(var + eps)
        x_hat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        self.x_hat, self.inv_std, self.gamma, self.mode = x_hat, inv_std, gamma, mode
        return gamma[None, :, None, None] * x_hat + beta[None, :, None, None]

    def backward(self, grad):
        axes = (0, 2, 3)
        d_gamma = (grad * self.x_hat).sum(axis=axes)
        d_beta = grad.sum(axis=axes)
        d_x_hat = grad * self.gamma[None, :, None, None]
        inv_std = self.inv_std[None, :, None, None]
        if self.mode == "train":
            m = grad.shape[0] * grad.shape[2] * grad.shape[3]
            d_x = inv_std / m * (
                m * d_x_hat
                - d_x_hat.sum(axis=axes, keepdims=True)
                - self.x_hat * (d_x_hat * self.x_hat).sum(axis=axes, keepdims=True)
            )
        else:
            d_x = d_x_hat * inv_std
        return d_x, d_gamma, d_beta


class ReLU(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0).astype(x.dtype)

    def backward(self, grad):
        return (grad * self.mask,)


class MaxPool2d(Function):
    """2x2 window, stride 2. Ties route the gradient to the first maximum in row-major order."""

    def forward(self, x):
        if x.ndim != 4:
            raise _shape_error(f"maxpool2d expects 4-D input, got {x.shape}")
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise _shape_error(f"maxpool2d needs even spatial dims, got {h}x{w}")
        windows = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        self.argmax = windows.argmax(axis=-1)[..., None]
        self.in_shape = x.shape
        return np.take_along_axis(windows, self.argmax, axis=-1)[..., 0]

    def backward(self, grad):
        n, c, h, w = self.in_shape
        routed = np.zeros((n, c, h // 2, w // 2, 4), dtype=grad.dtype)
        np.put_along_axis(routed, self.argmax, grad[..., None], axis=-1)
        d_x = routed.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (d_x,)


class UpsampleNearest2x(Function):
    def forward(self, x):
        if x.ndim != 4:
            raise _shape_error(f"upsample expects 4-D input, got {x.shape}")
        self.in_shape = x.shape
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, grad):
        n, c, h, w = self.in_shape
        return (grad.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)


class Dense(Function):
    def forward(self, x, weight, bias):
        if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
            raise _shape_error(f"dense expects (N, {weight.shape[0]}) input, got {x.shape}")
        if bias.shape != (weight.shape[1],):
            raise _shape_error(f"dense bias must have shape ({weight.shape[1]},), got {bias.shape}")
        self.x, self.weight = x, weight
        return x @ weight + bias

    def backward(self, grad):
        return grad @ self.weight.T, self.x.T @ grad, grad.sum(axis=0)


class Softmax(Function):
    def forward(self, x, axis=1):
        shifted = x - x.max(axis=axis, keepdims=True)
        exp = np.exp(shifted)
        self.out = exp / exp.sum(axis=axis, keepdims=True)
        self.axis = axis
        return self.out

    def backward(self, grad):
        s = self.out
        return (s * (grad - (grad * s).sum(axis=self.axis, keepdims=True)),)


class Concat(Function):
    def forward(self, *arrays, axis=1):
        batch_sizes = {a.shape[0] for a in arrays}
        if len(batch_sizes) != 1:
            raise _shape_error(f"concat inputs disagree on batch size: {[a.shape for a in arrays]}")
        self.sizes = [a.shape[axis] for a in arrays]
        self.axis = axis
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        splits = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, splits, axis=self.axis))


class GlobalAvgPool2d(Function):
    def forward(self, x):
        if x.ndim != 4:
            raise _shape_error(f"global average pooling expects 4-D input, got {x.shape}")
        self.in_shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        n, c, h, w = self.in_shape
        return (np.broadcast_to(grad[:, :, None, None] / (h * w), self.in_shape).copy(),)


def _check_prob_target(probs: Tensor, target: Tensor) -> None:
    if probs.shape != target.shape:
        raise _shape_error(f"probs {probs.shape} and target {target.shape} must have the same shape")
    if probs.ndim < 2:
        raise _shape_error(f"probs need a class axis at position 1, got shape {probs.shape}")


class CrossEntropy(Function):
    def forward(self, probs, target):
        if not is_one_hot(target, axis=1):
            raise DannSegError(ErrorCode.INVALID_TARGET, "cross-entropy target must be one-hot along axis 1")
        self.pixels = probs.size // probs.shape[1]
        clamped = np.maximum(probs, PROB_EPS)
        self.probs, self.clamped, self.target = probs, clamped, target
        return np.asarray(-(target * np.log(clamped)).sum() / self.pixels, dtype=probs.dtype)

    def backward(self, grad):
        d_probs = -grad * self.target / self.clamped / self.pixels
        d_probs = np.where(self.probs > PROB_EPS, d_probs, 0)
        return d_probs, None


class SoftDiceLoss(Function):
    def forward(self, probs, target):
        if probs.shape[1] < 2:
            raise _shape_error("soft dice needs a background class and at least one foreground class")
        if not is_one_hot(target, axis=1):
            raise DannSegError(ErrorCode.INVALID_TARGET, "soft dice target must be one-hot along axis 1")
        axes = tuple(a for a in range(probs.ndim) if a != 1)
        p, t = probs[:, 1:], target[:, 1:]
        self.intersection = (p * t).sum(axis=axes)
        self.denominator = p.sum(axis=axes) + t.sum(axis=axes) + DICE_EPS
        dsc = (2 * self.intersection + DICE_EPS) / self.denominator
        self.target, self.shape = target, probs.shape
        return np.asarray(1.0 - dsc.mean(), dtype=probs.dtype)

    def backward(self, grad):
        foreground = self.shape[1] - 1
        view = [1] * len(self.shape)
        view[1] = foreground
        inter = self.intersection.reshape(view)
        denom = self.denominator.reshape(view)
        t = self.target[:, 1:]
        d_dsc = (2 * t * denom - (2 * inter + DICE_EPS)) / denom ** 2
        d_probs = np.zeros(self.shape, dtype=grad.dtype)
        d_probs[:, 1:] = -grad * d_dsc / foreground
        return d_probs, None


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    return Conv2d.apply(x, kernel, bias, stride=stride, padding=padding)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running: Optional[RunningStats] = None,
    mode: str = "train",
    momentum: float = 0.9,
    eps: float = 1e-5,
    update_stats: bool = True,
) -> Tensor:
    return BatchNorm2d.apply(
        x, gamma, beta, running=running, mode=mode, momentum=momentum, eps=eps, update_stats=update_stats
    )


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def maxpool2d(x: Tensor) -> Tensor:
    return MaxPool2d.apply(x)


def upsample_nearest2x(x: Tensor) -> Tensor:
    return UpsampleNearest2x.apply(x)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return Dense.apply(x, weight, bias)


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def global_avg_pool2d(x: Tensor) -> Tensor:
    return GlobalAvgPool2d.apply(x)


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


def cross_entropy(probs: Tensor, target: Tensor) -> Tensor:
    """Mean over pixels (or rows) of -sum_k t_k log p_k, with p clamped at 1e-12."""
    _check_prob_target(probs, target)
    return CrossEntropy.apply(probs, target)


def soft_dice_loss(probs: Tensor, target: Tensor) -> Tensor:
    """1 - mean over foreground classes of (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps)."""
    _check_prob_target(probs, target)
    return SoftDiceLoss.apply(probs, target)


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """Integer labels of shape (N, ...) to a one-hot array of shape (N, K, ...)."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DannSegError(ErrorCode.INVALID_TARGET, f"labels must lie in [0, {num_classes})")
    encoded = np.eye(num_classes, dtype=dtype)[labels]
    return np.moveaxis(encoded, -1, 1)
