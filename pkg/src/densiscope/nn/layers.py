"""Layer kernels with exact analytic backward passes.

Everything operates on plain numpy arrays. Activations and images travel as
rank-4 tensors (batch, channel, height, width); dense layers work on
(batch, features) matrices. Each layer caches during ``forward`` exactly what
its ``backward`` needs, and additionally exposes a cache-free ``infer`` used
for prediction and attribution.

Compute dtype follows the input: float32 by default, float64 when callers
pass double arrays (oracle tests rely on this).
"""

from __future__ import annotations

import numpy as np

from ..exceptions import ShapeError


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32):
    """He-uniform initialization: U(-limit, limit) with limit = sqrt(6/fan_in)."""
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def same_padding(size: int, stride: int, kernel: int = 3) -> tuple[int, int, int]:
    """Zero-padding for "same" convolution along one axis.

    Output length is ceil(size / stride); any odd total padding puts the
    extra row/column at the high end.

    Returns (out_size, pad_lo, pad_hi).
    """
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    lo = total // 2
    return out, lo, total - lo


def _patches(x_padded: np.ndarray, out_h: int, out_w: int, stride: int, kernel: int = 3):
    """Strided view (N, C, out_h, out_w, kernel, kernel) over a padded input."""
    view = np.lib.stride_tricks.sliding_window_view(x_padded, (kernel, kernel), axis=(2, 3))
    return view[:, :, ::stride, ::stride][:, :, :out_h, :out_w]


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int):
    """Cross-correlation with "same" zero padding.

    x: (N, C_in, H, W); weight: (C_out, C_in, k, k); bias: (C_out,).
    Returns (y, x_padded) where y is (N, C_out, ceil(H/s), ceil(W/s)).
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects a rank-4 input, got shape {x.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"input has {x.shape[1]} channels but kernel expects {weight.shape[1]}")
    k = weight.shape[2]
    out_h, ph_lo, ph_hi = same_padding(x.shape[2], stride, k)
    out_w, pw_lo, pw_hi = same_padding(x.shape[3], stride, k)
    x_padded = np.pad(x, ((0, 0), (0, 0), (ph_lo, ph_hi), (pw_lo, pw_hi)))
    pat = _patches(x_padded, out_h, out_w, stride, k)
    y = np.tensordot(pat, weight, axes=([1, 4, 5], [1, 2, 3]))
    y = np.ascontiguousarray(y.transpose(0, 3, 1, 2))
    y += bias.reshape(1, -1, 1, 1)
    return y, x_padded


def conv2d_input_grad(grad_out: np.ndarray, weight: np.ndarray, stride: int,
                      in_hw: tuple[int, int]) -> np.ndarray:
    """Exact adjoint of :func:`conv2d_forward` with respect to its input.

    Works for any upstream field (gradients or DeepLIFT multipliers).
    """
    n, _, out_h, out_w = grad_out.shape
    k = weight.shape[2]
    in_h, in_w = in_hw
    _, ph_lo, ph_hi = same_padding(in_h, stride, k)
    _, pw_lo, pw_hi = same_padding(in_w, stride, k)
    # (N, out_h, out_w, C_in, k, k)
    t = np.tensordot(grad_out, weight, axes=([1], [0]))
    grad_padded = np.zeros((n, weight.shape[1], in_h + ph_lo + ph_hi, in_w + pw_lo + pw_hi),
                           dtype=t.dtype)
    for ki in range(k):
        for kj in range(k):
            grad_padded[:, :, ki:ki + stride * out_h:stride,
                        kj:kj + stride * out_w:stride] += t[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
    return grad_padded[:, :, ph_lo:ph_lo + in_h, pw_lo:pw_lo + in_w]


class Conv2d:
    """3x3 convolution ("same" padding) with stride 1 or 2."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 2,
                 rng: np.random.Generator | None = None, kernel_size: int = 3):
        if kernel_size != 3:
            raise ShapeError("conv kernels are fixed at 3x3")
        if stride not in (1, 2):
            raise ShapeError(f"stride must be 1 or 2, got {stride}")
        rng = rng if rng is not None else np.random.default_rng()
        self.stride = stride
        self.weight = he_uniform(rng, (out_channels, in_channels, 3, 3),
                                 fan_in=in_channels * 9)
        self.bias = np.zeros(out_channels, dtype=np.float32)
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        y, x_padded = conv2d_forward(x, self.weight, self.bias, self.stride)
        self._cache = (x_padded, x.shape, y.shape)
        return y

    def infer(self, x: np.ndarray) -> np.ndarray:
        return conv2d_forward(x, self.weight, self.bias, self.stride)[0]

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        x_padded, x_shape, y_shape = self._cache
        pat = _patches(x_padded, y_shape[2], y_shape[3], self.stride)
        self.grads["weight"] = np.tensordot(grad_out, pat, axes=([0, 2, 3], [0, 2, 3]))
        self.grads["bias"] = grad_out.sum(axis=(0, 2, 3))
        return conv2d_input_grad(grad_out, self.weight, self.stride, x_shape[2:])

    def params(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def astype(self, dtype) -> "Conv2d":
        self.weight = self.weight.astype(dtype)
        self.bias = self.bias.astype(dtype)
        return self


class BatchNorm2d:
    """Per-channel batch normalization over (batch, height, width).

    Train mode normalizes with batch statistics (population variance) and
    folds them into the running averages:

        running = momentum * running + (1 - momentum) * batch

    Inference mode is a pure per-channel affine map built from the running
    statistics, which is what the attribution pass propagates through.
    """

    def __init__(self, channels: int, momentum: float = 0.99, eps: float = 1e-5):
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {momentum}")
        if eps <= 0.0:
            raise ValueError("eps must be positive")
        self.momentum = momentum
        self.eps = eps
        self.gamma = np.ones(channels, dtype=np.float32)
        self.beta = np.zeros(channels, dtype=np.float32)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def _affine(self):
        """Inference-mode per-channel (scale, shift)."""
        scale = self.gamma / np.sqrt(self.running_var + self.eps)
        return scale, self.beta - self.running_mean * scale

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        if training:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            inv_std = 1.0 / np.sqrt(var + np.asarray(self.eps, dtype=x.dtype))
            x_hat = (x - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
            self.running_mean = (self.momentum * self.running_mean
                                 + (1.0 - self.momentum) * mean).astype(self.running_mean.dtype)
            self.running_var = (self.momentum * self.running_var
                                + (1.0 - self.momentum) * var).astype(self.running_var.dtype)
            self._cache = ("train", x_hat, inv_std)
            return self.gamma.reshape(1, -1, 1, 1) * x_hat + self.beta.reshape(1, -1, 1, 1)
        y = self.infer(x)
        self._cache = ("infer", x)
        return y

    def infer(self, x: np.ndarray) -> np.ndarray:
        scale, shift = self._affine()
        return x * scale.reshape(1, -1, 1, 1) + shift.reshape(1, -1, 1, 1)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        mode = self._cache[0]
        if mode == "infer":
            x = self._cache[1]
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            x_hat = (x - self.running_mean.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
            self.grads["gamma"] = (grad_out * x_hat).sum(axis=(0, 2, 3))
            self.grads["beta"] = grad_out.sum(axis=(0, 2, 3))
            return grad_out * (self.gamma * inv).reshape(1, -1, 1, 1)
        _, x_hat, inv_std = self._cache
        m = float(x_hat.shape[0] * x_hat.shape[2] * x_hat.shape[3])
        self.grads["gamma"] = (grad_out * x_hat).sum(axis=(0, 2, 3))
        self.grads["beta"] = grad_out.sum(axis=(0, 2, 3))
        g_hat = grad_out * self.gamma.reshape(1, -1, 1, 1)
        sum_g = g_hat.sum(axis=(0, 2, 3), keepdims=True)
        sum_gx = (g_hat * x_hat).sum(axis=(0, 2, 3), keepdims=True)
        return (inv_std.reshape(1, -1, 1, 1) / m) * (m * g_hat - sum_g - x_hat * sum_gx)

    def params(self) -> dict[str, np.ndarray]:
        return {"gamma": self.gamma, "beta": self.beta}

    def state(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def astype(self, dtype) -> "BatchNorm2d":
        for name in ("gamma", "beta", "running_mean", "running_var"):
            setattr(self, name, getattr(self, name).astype(dtype))
        return self


class ReLU:
    """Elementwise max(0, x); the subgradient at 0 is taken as 0."""

    def __init__(self):
        self._mask = None

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, np.asarray(0, dtype=x.dtype))

    def infer(self, x: np.ndarray) -> np.ndarray:
        return np.maximum(x, np.asarray(0, dtype=x.dtype))

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return grad_out * self._mask


def dropout(x: np.ndarray, keep_prob: float = 0.5, training: bool = True,
            seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Inverted dropout: kept units are scaled by 1/keep_prob at train time.

    Inference mode is the identity with an all-ones mask. The same seed
    yields the same mask, bit for bit.
    """
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"keep_prob must lie in (0, 1], got {keep_prob}")
    if not training or keep_prob == 1.0:
        return x, np.ones_like(x)
    mask = (np.random.default_rng(seed).random(x.shape) < keep_prob).astype(x.dtype)
    return x * mask / np.asarray(keep_prob, dtype=x.dtype), mask


class Dropout:
    """Inverted dropout layer. Training mode draws its mask from the rng
    handed to ``forward`` so the train loop controls determinism."""

    def __init__(self, keep_prob: float = 0.5):
        if not 0.0 < keep_prob <= 1.0:
            raise ValueError(f"keep_prob must lie in (0, 1], got {keep_prob}")
        self.keep_prob = keep_prob
        self._mask = None

    def forward(self, x: np.ndarray, training: bool = False,
                rng: np.random.Generator | None = None) -> np.ndarray:
        if not training or self.keep_prob == 1.0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        self._mask = (rng.random(x.shape) < self.keep_prob).astype(x.dtype)
        return x * self._mask / np.asarray(self.keep_prob, dtype=x.dtype)

    def infer(self, x: np.ndarray) -> np.ndarray:
        return x

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._mask is None:
            return grad_out
        return grad_out * self._mask / np.asarray(self.keep_prob, dtype=grad_out.dtype)


class Dense:
    """Fully connected layer: y = x W + b."""

    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng()
        self.weight = he_uniform(rng, (in_features, out_features), fan_in=in_features)
        self.bias = np.zeros(out_features, dtype=np.float32)
        self.grads: dict[str, np.ndarray] = {}
        self._x = None

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.weight.shape[0]:
            raise ShapeError(
                f"dense expects (batch, {self.weight.shape[0]}), got {x.shape}")
        self._x = x
        return x @ self.weight + self.bias

    def infer(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.weight.shape[0]:
            raise ShapeError(
                f"dense expects (batch, {self.weight.shape[0]}), got {x.shape}")
        return x @ self.weight + self.bias

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        self.grads["weight"] = self._x.T @ grad_out
        self.grads["bias"] = grad_out.sum(axis=0)
        return grad_out @ self.weight.T

    def params(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def astype(self, dtype) -> "Dense":
        self.weight = self.weight.astype(dtype)
        self.bias = self.bias.astype(dtype)
        return self


class Flatten:
    """(N, C, H, W) -> (N, C*H*W)."""

    def __init__(self):
        self._shape = None

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def infer(self, x: np.ndarray) -> np.ndarray:
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return grad_out.reshape(self._shape)
