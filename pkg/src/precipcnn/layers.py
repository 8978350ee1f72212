"""Layer primitives with explicit forward/backward passes.

Every layer caches what its backward pass needs during ``forward`` and
consumes that cache in ``backward``. Learnable arrays live in ``params`` and
their gradients in ``grads`` (same keys), which is what the optimizer walks.

Convolution and pooling are written once for any number of spatial axes;
``Conv2D``/``Conv3D`` and ``MaxPool2D``/``MaxPool3D`` fix that number.
"""
from __future__ import annotations

from typing import Dict, Optional, Sequence, Tuple

import numpy as np


class ShapeError(ValueError):
    """Raised when an input does not fit a layer's configuration."""


class CacheError(RuntimeError):
    """Raised when ``backward`` is called without a matching forward cache."""


def _as_tuple(value, nd: int) -> Tuple[int, ...]:
    if np.isscalar(value):
        return (int(value),) * nd
    value = tuple(int(v) for v in value)
    if len(value) != nd:
        raise ValueError(f"expected {nd} values, got {value}")
    return value


class Layer:
    """Base class: parameter/gradient registries and the forward cache slot."""

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise CacheError(f"{type(self).__name__}.backward called without a forward pass")
        cache, self._cache = self._cache, None
        return cache

    def output_shape(self, input_shape: Sequence[int]) -> Tuple[int, ...]:
        """Per-sample output shape (batch axis excluded)."""
        return tuple(input_shape)


class ConvND(Layer):
    """Zero-padded cross-correlation over ``nd`` spatial axes.

    kernels: [P, M, *kernel_size], bias: [P]. Output position ``i`` sums
    ``kernels[p, m, s] * padded_input[m, i*stride + s]`` over ``m`` and
    the kernel offsets ``s``, then adds ``bias[p]``.
    """

    nd = 0
    CHUNK_ROWS = 4096

    def __init__(self, kernels: np.ndarray, bias: np.ndarray, stride: int = 1, padding: int = 0):
        super().__init__()
        kernels = np.asarray(kernels)
        bias = np.asarray(bias)
        if kernels.ndim != self.nd + 2:
            raise ShapeError(f"kernels must have rank {self.nd + 2}, got shape {kernels.shape}")
        if bias.shape != (kernels.shape[0],):
            raise ShapeError(f"bias shape {bias.shape} does not match {kernels.shape[0]} kernels")
        if stride < 1 or padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")
        self.params = {"kernels": kernels, "bias": bias}
        self.stride = int(stride)
        self.padding = int(padding)

    @property
    def kernel_size(self) -> Tuple[int, ...]:
        return self.params["kernels"].shape[2:]

    @property
    def in_channels(self) -> int:
        return self.params["kernels"].shape[1]

    @property
    def out_channels(self) -> int:
        return self.params["kernels"].shape[0]

    def output_shape(self, input_shape):
        channels, *spatial = input_shape
        if len(spatial) != self.nd:
            raise ShapeError(f"expected {self.nd} spatial axes, got input shape {tuple(input_shape)}")
        if channels != self.in_channels:
            raise ShapeError(f"input has {channels} channels, layer expects {self.in_channels}")
        out = []
        for size, k in zip(spatial, self.kernel_size):
            n = (size + 2 * self.padding - k) // self.stride + 1
            if size + 2 * self.padding < k or n < 1:
                raise ShapeError(
                    f"kernel {self.kernel_size} does not fit spatial extent {tuple(spatial)} "
                    f"with padding {self.padding}"
                )
            out.append(n)
        return (self.out_channels, *out)

    def _offset_slices(self, out_sizes):
        """(flat offset index, slice tuple over spatial axes) for every kernel offset."""
        for i, off in enumerate(np.ndindex(*self.kernel_size)):
            yield i, tuple(slice(o, o + self.stride * (n - 1) + 1, self.stride) for o, n in zip(off, out_sizes))

    @staticmethod
    def _per_offset(k):
        p, m = k.shape[:2]
        return np.ascontiguousarray(k.reshape(p, m, -1).transpose(2, 1, 0))

    def _chunks(self, n, positions):
        # batch slices small enough for the per-offset temporaries to stay in cache
        step = max(1, self.CHUNK_ROWS // max(1, positions))
        return [slice(s, min(s + step, n)) for s in range(0, n, step)]

    def forward(self, x, training=False):
        x = np.asarray(x)
        if x.ndim != self.nd + 2:
            raise ShapeError(f"expected input of rank {self.nd + 2}, got shape {x.shape}")
        out_shape = self.output_shape(x.shape[1:])
        n, p = x.shape[0], self.out_channels
        positions = int(np.prod(out_shape[1:]))
        # channels-last, zero-padded copy: [N, *padded, M]
        pad = self.padding
        xp = np.zeros((n,) + tuple(d + 2 * pad for d in x.shape[2:]) + (x.shape[1],), dtype=x.dtype)
        xp[(slice(None),) + tuple(slice(pad, pad + d) for d in x.shape[2:])] = np.moveaxis(x, 1, -1)
        k = self.params["kernels"]
        kt = self._per_offset(k)  # [kvol, M, P], contiguous so matmul stays on BLAS
        out = np.empty((n,) + out_shape[1:] + (p,), dtype=np.result_type(x, k))
        offsets = list(self._offset_slices(out_shape[1:]))
        for b in self._chunks(n, positions):
            acc = np.zeros(((b.stop - b.start) * positions, p), dtype=out.dtype)
            for i, sl in offsets:
                acc += xp[(b,) + sl].reshape(acc.shape[0], -1) @ kt[i]
            out[b] = acc.reshape(out[b].shape)
        out += self.params["bias"]
        self._cache = (x.shape, xp)
        return np.ascontiguousarray(np.moveaxis(out, -1, 1))

    def backward(self, grad_out):
        x_shape, xp = self._take_cache()
        k = self.params["kernels"]
        expected = (x_shape[0],) + self.output_shape(x_shape[1:])
        if grad_out.shape != expected:
            raise CacheError(f"grad_output shape {grad_out.shape} does not match forward output {expected}")
        nd, p, n = self.nd, self.out_channels, x_shape[0]
        positions = int(np.prod(grad_out.shape[2:]))
        self.grads["bias"] = grad_out.sum(axis=(0, *range(2, 2 + nd)))
        g_all = np.ascontiguousarray(np.moveaxis(grad_out, 1, -1))  # [N, *out, P]
        kt = np.ascontiguousarray(np.swapaxes(self._per_offset(k), 1, 2))  # [kvol, P, M]
        dtype = np.result_type(grad_out, k)
        gk = np.zeros((kt.shape[0], p, kt.shape[2]), dtype=dtype)
        gxp = np.zeros_like(xp, dtype=dtype)
        offsets = list(self._offset_slices(grad_out.shape[2:]))
        for b in self._chunks(n, positions):
            g = g_all[b].reshape(-1, p)
            gt = np.ascontiguousarray(g.T)
            for i, sl in offsets:
                idx = (b,) + sl
                gk[i] += gt @ xp[idx].reshape(g.shape[0], -1)
                gxp[idx] += (g @ kt[i]).reshape(gxp[idx].shape)
        self.grads["kernels"] = np.moveaxis(gk, 0, -1).reshape(k.shape)
        pad = self.padding
        gx = gxp[(slice(None),) + tuple(slice(pad, pad + d) for d in x_shape[2:])]
        return np.ascontiguousarray(np.moveaxis(gx, -1, 1))


class Conv2D(ConvND):
    nd = 2


class Conv3D(ConvND):
    nd = 3


class MaxPoolND(Layer):
    """Max pooling without padding; no learnable parameters.

    Ties go to the first maximal element of the window in row-major scan order,
    and backward routes each output gradient to that recorded position.
    """

    nd = 0

    def __init__(self, kernel_size, stride: int = 1):
        super().__init__()
        self.kernel_size = _as_tuple(kernel_size, self.nd)
        if min(self.kernel_size) < 1 or stride < 1:
            raise ValueError("kernel_size and stride must be >= 1")
        self.stride = int(stride)

    def output_shape(self, input_shape):
        channels, *spatial = input_shape
        if len(spatial) != self.nd:
            raise ShapeError(f"expected {self.nd} spatial axes, got input shape {tuple(input_shape)}")
        out = []
        for size, k in zip(spatial, self.kernel_size):
            if k > size:
                raise ShapeError(f"pool window {self.kernel_size} larger than input {tuple(spatial)}")
            out.append((size - k) // self.stride + 1)
        return (channels, *out)

    def forward(self, x, training=False):
        x = np.asarray(x)
        if x.ndim != self.nd + 2:
            raise ShapeError(f"expected input of rank {self.nd + 2}, got shape {x.shape}")
        out_shape = self.output_shape(x.shape[1:])
        n, c = x.shape[:2]
        out = np.empty((n,) + out_shape, dtype=x.dtype)
        arg = np.empty((n,) + out_shape, dtype=np.int32)
        slices = [
            tuple(slice(o, o + self.stride * (m - 1) + 1, self.stride) for o, m in zip(off, out_shape[1:]))
            for off in np.ndindex(*self.kernel_size)
        ]
        step = max(1, 16384 // int(np.prod(out_shape)))
        for s in range(0, n, step):
            b = slice(s, min(s + step, n))
            best, idx = out[b], arg[b]
            np.copyto(best, x[(b, slice(None)) + slices[0]])
            idx.fill(0)
            better = np.empty(best.shape, dtype=bool)
            # row-major offset scan; strict ">" keeps the first maximum on ties
            for i, sl in enumerate(slices[1:], start=1):
                v = x[(b, slice(None)) + sl]
                np.greater(v, best, out=better)
                np.copyto(best, v, where=better)
                np.copyto(idx, i, where=better)
        assert out.shape[1:] == out_shape
        self._cache = (x.shape, arg)
        return out

    def argmax_input_indices(self, x_shape, arg: np.ndarray) -> np.ndarray:
        """Flat indices into ``x`` of each window's recorded maximum."""
        offsets = np.unravel_index(arg, self.kernel_size)
        n_idx, c_idx = np.indices(arg.shape[:2], sparse=True)
        coords = [n_idx[(...,) + (None,) * self.nd], c_idx[(...,) + (None,) * self.nd]]
        out_grid = np.indices(arg.shape[2:], sparse=True)
        for ax in range(self.nd):
            coords.append(out_grid[ax][None, None] * self.stride + offsets[ax])
        coords = np.broadcast_arrays(*coords)
        return np.ravel_multi_index(coords, x_shape)

    def backward(self, grad_out):
        x_shape, arg = self._take_cache()
        if grad_out.shape != arg.shape:
            raise CacheError(f"grad_output shape {grad_out.shape} does not match cached {arg.shape}")
        flat = self.argmax_input_indices(x_shape, arg)
        gx = np.bincount(flat.ravel(), weights=grad_out.ravel(), minlength=int(np.prod(x_shape)))
        return gx.reshape(x_shape).astype(grad_out.dtype, copy=False)


class MaxPool2D(MaxPoolND):
    nd = 2


class MaxPool3D(MaxPoolND):
    nd = 3


class BatchNorm(Layer):
    """Per-channel batch normalization over the batch and all spatial axes.

    Training mode normalizes with batch statistics (population variance) and
    folds them into the running estimates; inference mode uses the running
    estimates, so each sample is processed independently.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1, dtype=np.float64):
        super().__init__()
        if eps <= 0:
            raise ValueError("eps must be positive")
        if not 0 < momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")
        self.params = {"gamma": np.ones(channels, dtype=dtype), "beta": np.zeros(channels, dtype=dtype)}
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = float(eps)
        self.momentum = float(momentum)

    @property
    def channels(self) -> int:
        return self.params["gamma"].shape[0]

    def output_shape(self, input_shape):
        if input_shape[0] != self.channels:
            raise ShapeError(f"input has {input_shape[0]} channels, layer expects {self.channels}")
        return tuple(input_shape)

    def forward(self, x, training=False):
        x = np.asarray(x)
        if x.ndim < 2 or x.shape[1] != self.channels:
            raise ShapeError(f"expected [N, {self.channels}, ...], got {x.shape}")
        axes = (0,) + tuple(range(2, x.ndim))
        bshape = (1, -1) + (1,) * (x.ndim - 2)
        gamma = self.params["gamma"].reshape(bshape)
        beta = self.params["beta"].reshape(bshape)
        if training:
            if x.shape[0] < 2:
                raise ShapeError("batch normalization in training mode needs at least 2 samples")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mean
            self.running_var = (1 - m) * self.running_var + m * var
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
        self._cache = (xhat, inv_std, training) if training else None
        return gamma * xhat + beta

    def backward(self, grad_out):
        xhat, inv_std, _ = self._take_cache()
        if grad_out.shape != xhat.shape:
            raise CacheError(f"grad_output shape {grad_out.shape} does not match cached {xhat.shape}")
        axes = (0,) + tuple(range(2, xhat.ndim))
        bshape = (1, -1) + (1,) * (xhat.ndim - 2)
        m = xhat.size // self.channels
        self.grads["beta"] = grad_out.sum(axis=axes)
        self.grads["gamma"] = (grad_out * xhat).sum(axis=axes)
        dxhat = grad_out * self.params["gamma"].reshape(bshape)
        sum_d = dxhat.sum(axis=axes).reshape(bshape)
        sum_dx = (dxhat * xhat).sum(axis=axes).reshape(bshape)
        return inv_std.reshape(bshape) / m * (m * dxhat - sum_d - xhat * sum_dx)


class Linear(Layer):
    """Affine map ``y = x @ weight.T + bias`` on [N, in] inputs."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        super().__init__()
        weight, bias = np.asarray(weight), np.asarray(bias)
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise ShapeError(f"incompatible weight {weight.shape} and bias {bias.shape}")
        self.params = {"weight": weight, "bias": bias}

    def output_shape(self, input_shape):
        if tuple(input_shape) != (self.params["weight"].shape[1],):
            raise ShapeError(f"expected input width {self.params['weight'].shape[1]}, got {tuple(input_shape)}")
        return (self.params["weight"].shape[0],)

    def forward(self, x, training=False):
        x = np.asarray(x)
        if x.ndim != 2:
            raise ShapeError(f"linear layer expects [N, in], got {x.shape}")
        self.output_shape(x.shape[1:])
        if not training:
            # non-BLAS contraction: each row's result is independent of the batch it sits in
            return np.einsum("ni,oi->no", x, self.params["weight"]) + self.params["bias"]
        self._cache = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, grad_out):
        x = self._take_cache()
        if grad_out.shape != (x.shape[0], self.params["weight"].shape[0]):
            raise CacheError(f"grad_output shape {grad_out.shape} does not match forward output")
        self.grads["weight"] = grad_out.T @ x
        self.grads["bias"] = grad_out.sum(axis=0)
        return grad_out @ self.params["weight"]


class ReLU(Layer):
    def forward(self, x, training=False):
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, grad_out):
        mask = self._take_cache()
        if grad_out.shape != mask.shape:
            raise CacheError("grad_output shape does not match cached mask")
        # derivative at exactly 0 is taken as 0
        return np.where(mask, grad_out, 0).astype(grad_out.dtype, copy=False)


class Flatten(Layer):
    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x, training=False):
        self._cache = x.shape
        return np.ascontiguousarray(x).reshape(x.shape[0], -1)

    def backward(self, grad_out):
        shape = self._take_cache()
        return grad_out.reshape(shape)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean squared error and its gradient with respect to ``pred``."""
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape or pred.ndim != 1:
        raise ShapeError(f"pred {pred.shape} and target {target.shape} must be equal-length vectors")
    if pred.size == 0:
        raise ShapeError("mse_loss needs at least one sample")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def conv2d_forward(layer: Conv2D, x: np.ndarray) -> np.ndarray:
    return layer.forward(x)


def conv3d_forward(layer: Conv3D, x: np.ndarray) -> np.ndarray:
    return layer.forward(x)


def conv_backward(layer: ConvND, grad_out: np.ndarray):
    """Return (grad_input, grad_kernels, grad_bias) for the last forward call."""
    gx = layer.backward(grad_out)
    return gx, layer.grads["kernels"], layer.grads["bias"]


def maxpool_forward(layer: MaxPoolND, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    out = layer.forward(x)
    x_shape, arg = layer._cache
    return out, layer.argmax_input_indices(x_shape, arg)


def batchnorm_backward(layer: BatchNorm, grad_out: np.ndarray):
    gx = layer.backward(grad_out)
    return gx, layer.grads["gamma"], layer.grads["beta"]


def make_conv(nd: int, kernels, bias, stride=1, padding=0) -> ConvND:
    return {2: Conv2D, 3: Conv3D}[nd](kernels, bias, stride=stride, padding=padding)


def make_maxpool(nd: int, kernel_size, stride=1) -> MaxPoolND:
    return {2: MaxPool2D, 3: MaxPool3D}[nd](kernel_size, stride=stride)
