"""Array type for stored parameters and the pure layer primitives.

Activations are plain ``numpy`` arrays in NHWC layout. ``Tensor`` is the
storage container used for parameters that may be held at reduced precision
(binary16 or symmetric per-channel int8) and is what gets serialized.

All primitives accept float32 arrays (float64 is allowed for gradient checks)
and return arrays of the same dtype. Shapes are validated before any data is
touched.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, TreatNetError

QI8_MAX = 127


class DType(enum.IntEnum):
    F32 = 0
    F16 = 1
    QI8 = 2


_STORAGE = {DType.F32: np.float32, DType.F16: np.float16, DType.QI8: np.int8}


@dataclass(frozen=True, eq=False)
class Tensor:
    """Immutable n-d array with an element type tag.

    For ``QI8`` the real value of element ``i`` along ``channel_axis`` slice
    ``c`` is ``data[i] * scales[c]``.
    """

    shape: tuple[int, ...]
    dtype: DType
    data: np.ndarray
    scales: np.ndarray | None = None
    channel_axis: int | None = None
    _f32: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        shape = tuple(int(d) for d in self.shape)
        object.__setattr__(self, "shape", shape)
        if any(d < 1 for d in shape):
            raise ShapeError(f"tensor dimensions must be positive, got {shape}")
        data = np.ascontiguousarray(self.data, dtype=_STORAGE[self.dtype]).reshape(shape)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        if self.dtype is DType.QI8:
            if self.scales is None or self.channel_axis is None:
                raise TreatNetError("QI8 tensor needs scales and channel_axis")
            axis = self.channel_axis % len(shape)
            scales = np.ascontiguousarray(self.scales, dtype=np.float32).ravel()
            if scales.size != shape[axis]:
                raise ShapeError(
                    f"{scales.size} scales for channel axis of size {shape[axis]}"
                )
            if not np.all(scales > 0):
                raise TreatNetError("QI8 scales must be strictly positive")
            if data.size and np.any(data == -128):
                raise TreatNetError("QI8 values must lie in [-127, 127]")
            scales.setflags(write=False)
            object.__setattr__(self, "scales", scales)
            object.__setattr__(self, "channel_axis", axis)
        elif self.scales is not None:
            raise TreatNetError(f"{self.dtype.name} tensor cannot carry scales")

    @classmethod
    def from_array(cls, array) -> "Tensor":
        array = np.asarray(array, dtype=np.float32)
        return cls(array.shape, DType.F32, array)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def itemsize(self) -> int:
        return self.data.itemsize

    def to_f32(self) -> np.ndarray:
        """Dequantize to a read-only float32 array (cached)."""
        if self._f32 is None:
            if self.dtype is DType.QI8:
                bshape = [1] * len(self.shape)
                bshape[self.channel_axis] = -1
                out = self.data.astype(np.float32) * self.scales.reshape(bshape)
            else:
                out = self.data.astype(np.float32)
            out.setflags(write=False)
            object.__setattr__(self, "_f32", out)
        return self._f32

    def same_bits(self, other: "Tensor") -> bool:
        if self.dtype != other.dtype or self.shape != other.shape:
            return False
        if self.data.tobytes() != other.data.tobytes():
            return False
        if self.scales is None or other.scales is None:
            return self.scales is other.scales
        return self.channel_axis == other.channel_axis and (
            self.scales.tobytes() == other.scales.tobytes()
        )


def _check_rank(x, rank, name):
    if x.ndim != rank:
        raise ShapeError(f"{name} must be rank {rank}, got shape {x.shape}")


def _pad_same(x):
    return np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))


def _check_conv(x, kernel, bias):
    _check_rank(x, 4, "conv2d input")
    _check_rank(kernel, 4, "conv2d kernel")
    if kernel.shape[:2] != (3, 3):
        raise ShapeError(f"kernel must be 3x3xCinxCout, got {kernel.shape}")
    if x.shape[3] != kernel.shape[2]:
        raise ShapeError(
            f"input channels do not match kernel: input {x.shape}, kernel {kernel.shape}"
        )
    if bias.shape != (kernel.shape[3],):
        raise ShapeError(f"bias shape {bias.shape} does not match kernel {kernel.shape}")


def im2col(x: np.ndarray) -> np.ndarray:
    """Unfold 3x3 same-padded windows: (N,H,W,C) -> (N*H*W, 9*C).

    Column order is (ky, kx, c), matching ``kernel.reshape(9*C, Cout)``.
    """
    n, h, w, c = x.shape
    windows = sliding_window_view(_pad_same(x), (3, 3), axis=(1, 2))
    # windows: (N, H, W, C, 3, 3) -> (N, H, W, 3, 3, C)
    return windows.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, 9 * c)


def col2im(cols: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back onto the input."""
    n, h, w, c = shape
    cols = cols.reshape(n, h, w, 3, 3, c)
    out = np.zeros((n, h + 2, w + 2, c), dtype=cols.dtype)
    for ky in range(3):
        for kx in range(3):
            out[:, ky:ky + h, kx:kx + w, :] += cols[:, :, :, ky, kx, :]
    return out[:, 1:-1, 1:-1, :]


def conv2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """3x3 stride-1 cross-correlation with zero 'same' padding (im2col path)."""
    _check_conv(x, kernel, bias)
    n, h, w, _ = x.shape
    cout = kernel.shape[3]
    out = im2col(x) @ kernel.reshape(-1, cout)
    out += bias
    return out.reshape(n, h, w, cout)


def conv2d_direct(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Same as :func:`conv2d`, iterating the nine window offsets explicitly."""
    _check_conv(x, kernel, bias)
    n, h, w, _ = x.shape
    padded = _pad_same(x)
    out = np.zeros((n, h, w, kernel.shape[3]), dtype=np.result_type(x, kernel))
    for ky in range(3):
        for kx in range(3):
            out += padded[:, ky:ky + h, kx:kx + w, :] @ kernel[ky, kx]
    return out + bias


def maxpool2d(x: np.ndarray, pool: int = 2) -> np.ndarray:
    _check_rank(x, 4, "maxpool2d input")
    if pool != 2:
        raise ShapeError(f"only pool size 2 is supported, got {pool}")
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even spatial dims, got {x.shape}")
    return x.reshape(n, h // 2, 2, w // 2, 2, c).max(axis=(2, 4))


def maxpool2d_argmax(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pool and also return the flat index (0..3, row-major) of each winner."""
    out = maxpool2d(x)
    n, h, w, c = x.shape
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    idx = win.reshape(n, h // 2, w // 2, c, 4).argmax(axis=-1)
    return out, idx


def _check_channel_params(x, *params):
    c = x.shape[-1]
    for p in params:
        if np.shape(p) != (c,):
            raise ShapeError(f"per-channel parameter shape {np.shape(p)} != ({c},)")


def batchnorm(x, gamma, beta, mean, var, eps=1e-3):
    """Inference-form batch normalization over the last axis."""
    _check_channel_params(x, gamma, beta, mean, var)
    if np.any(np.asarray(var) < 0):
        raise TreatNetError("batchnorm variance must be non-negative")
    inv = (gamma / np.sqrt(var + eps)).astype(x.dtype)
    return (x - mean.astype(x.dtype)) * inv + beta.astype(x.dtype)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def dense(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    _check_rank(x, 2, "dense input")
    _check_rank(weight, 2, "dense weight")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense input {x.shape} does not match weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense bias {bias.shape} does not match weight {weight.shape}")
    return x @ weight + bias


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    _check_rank(x, 4, "global_avg_pool input")
    return x.mean(axis=(1, 2))


def to_float16(x) -> np.ndarray:
    """Round to IEEE binary16, nearest-even."""
    return np.asarray(x, dtype=np.float32).astype(np.float16)


def quantize_symmetric(w: np.ndarray, channel_axis: int = -1) -> Tensor:
    """Symmetric per-channel int8: scale = max|w_c| / 127, zero point 0.

    All-zero channels get scale 1.0 and all-zero codes.
    """
    w = np.asarray(w, dtype=np.float32)
    axis = channel_axis % w.ndim
    reduce_axes = tuple(i for i in range(w.ndim) if i != axis)
    max_abs = np.abs(w).max(axis=reduce_axes) if reduce_axes else np.abs(w)
    scales = np.where(max_abs > 0, max_abs / np.float32(QI8_MAX), np.float32(1.0))
    scales = scales.astype(np.float32)
    bshape = [1] * w.ndim
    bshape[axis] = -1
    ratio = w.astype(np.float64) / scales.astype(np.float64).reshape(bshape)
    q = np.clip(np.rint(ratio), -QI8_MAX, QI8_MAX).astype(np.int8)
    return Tensor(w.shape, DType.QI8, q, scales=scales, channel_axis=axis)
