"""8-bit weight/activation quantization and integer-domain layer kernels.

Weights map to signed 8-bit values in [-127, 127] with ``w ~ xi * w_q``;
activations in [0, 1] map to numerators ``n`` with value ``n / 256``.
Feature maps use (rows, cols, channels) layout and conv kernels use
(kh, kw, in_channels, out_channels).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import OverflowRisk, RangeViolation, ShapeError, ShapeMismatch

WEIGHT_MAX = 127
ACT_DENOM = 256
LEAKY_SLOPE = 0.1
_ACC_LIMIT = 2**31 - 1


@dataclass(frozen=True)
class QuantizedWeights:
    values: np.ndarray  # int8
    xi: float
    pre_scale: float

    @property
    def shape(self):
        return self.values.shape

    def dequantize(self) -> np.ndarray:
        return self.values.astype(np.float64) * self.xi


@dataclass(frozen=True)
class QuantizedActivations:
    values: np.ndarray  # uint8 numerators over ACT_DENOM

    @property
    def shape(self):
        return self.values.shape

    def dequantize(self) -> np.ndarray:
        return dequantize_activation(self.values)


@dataclass(frozen=True)
class AccumulatorTensor:
    values: np.ndarray  # int32
    scale: float

    @property
    def shape(self):
        return self.values.shape

    def dequantize(self) -> np.ndarray:
        return self.values.astype(np.float64) * self.scale


def quantize_weight(w):
    """Quantize weights in [-1, 1] to int8 codes in [-127, 127].

    Magnitudes up to 1/128 snap to +-1, magnitudes strictly between 1/128
    and 1 are truncated toward zero after scaling by 128, and +-1 maps to
    +-127. Zero stays zero. Accepts scalars or arrays.
    """
    w_arr = np.asarray(w, dtype=np.float64)
    a = np.abs(w_arr)
    if np.any(~np.isfinite(a)) or np.any(a > 1.0):
        raise RangeViolation("weights must lie in [-1, 1]")
    sign = np.sign(w_arr)
    q = np.trunc(128.0 * w_arr)
    q = np.where(a <= 1.0 / 128, sign, q)
    q = np.where(a == 1.0, sign * WEIGHT_MAX, q)
    q = q.astype(np.int8)
    return q if q.ndim else q.item()


def quantize_weights_tensor(t: np.ndarray) -> QuantizedWeights:
    t = np.asarray(t, dtype=np.float64)
    peak = float(np.max(np.abs(t))) if t.size else 0.0
    pre_scale = peak if peak > 0 else 1.0
    values = np.asarray(quantize_weight(t / pre_scale), dtype=np.int8)
    return QuantizedWeights(values=values, xi=pre_scale / 128.0, pre_scale=pre_scale)


def quantize_activation(a):
    """Map activations in [0, 1] to uint8 numerators: floor(256 a), with 1 -> 255."""
    a_arr = np.asarray(a, dtype=np.float64)
    if np.any(~np.isfinite(a_arr)) or np.any(a_arr < 0.0) or np.any(a_arr > 1.0):
        raise RangeViolation("activations must lie in [0, 1]")
    n = np.minimum(np.floor(ACT_DENOM * a_arr), ACT_DENOM - 1).astype(np.uint8)
    return n if n.ndim else n.item()


def dequantize_weight(q, xi: float):
    return np.asarray(q, dtype=np.float64) * xi if np.ndim(q) else float(q) * xi


def dequantize_activation(n):
    return np.asarray(n, dtype=np.float64) / ACT_DENOM if np.ndim(n) else float(n) / ACT_DENOM


def check_accumulator_bound(kh: int, kw: int, depth: int) -> None:
    if kh * kw * depth * WEIGHT_MAX * (ACT_DENOM - 1) > _ACC_LIMIT:
        raise OverflowRisk(
            f"{kh}x{kw}x{depth} kernel can overflow a 32-bit accumulator")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int,
            dtype) -> np.ndarray:
    """(ho*wo, kh*kw*C) patch matrix, columns ordered (ky, kx, c)."""
    c = xp.shape[2]
    cols = np.empty((ho, wo, kh, kw, c), dtype=dtype)
    for dy in range(kh):
        for dx in range(kw):
            cols[:, :, dy, dx] = xp[dy:dy + stride * (ho - 1) + 1:stride,
                                    dx:dx + stride * (wo - 1) + 1:stride]
    return cols.reshape(ho * wo, kh * kw * c)


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def qconv2d(act: QuantizedActivations, wt: QuantizedWeights,
            stride: int = 1, pad: int = 0) -> AccumulatorTensor:
    """Integer convolution of uint8 feature maps with int8 kernels."""
    x = act.values
    w = wt.values
    if x.ndim != 3 or w.ndim != 4 or x.shape[2] != w.shape[2]:
        raise ShapeMismatch(f"cannot convolve {x.shape} with kernel {w.shape}")
    kh, kw, depth, z = w.shape
    check_accumulator_bound(kh, kw, depth)
    ho = _out_size(x.shape[0], kh, stride, pad)
    wo = _out_size(x.shape[1], kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"kernel {w.shape} larger than padded input {x.shape}")

    # Integer partial sums are bounded by check_accumulator_bound, so a float
    # GEMM is exact: float32 below 2**24, float64 otherwise.
    exact32 = kh * kw * depth * WEIGHT_MAX * (ACT_DENOM - 1) < 2**24
    dtype = np.float32 if exact32 else np.float64
    cols = _im2col(np.pad(x, ((pad, pad), (pad, pad), (0, 0))), kh, kw, stride, ho, wo, dtype)
    acc = cols @ w.reshape(kh * kw * depth, z).astype(dtype)
    acc = acc.reshape(ho, wo, z)
    return AccumulatorTensor(values=np.rint(acc).astype(np.int32),
                             scale=wt.xi / ACT_DENOM)


def bn_fold(gamma, beta, mean, var, eps: float = 1e-5):
    """Fold batch-norm statistics into a per-channel affine (scale, shift)."""
    var = np.asarray(var, dtype=np.float64)
    if np.any(var < 0):
        raise RangeViolation("variance must be non-negative")
    inv = np.asarray(gamma, dtype=np.float64) / np.sqrt(var + eps)
    shift = np.asarray(beta, dtype=np.float64) - inv * np.asarray(mean, dtype=np.float64)
    return inv, shift


def leaky_relu(x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def requantize(acc: AccumulatorTensor, scale=None, shift=None,
               leaky: bool = False, slope: float = LEAKY_SLOPE) -> QuantizedActivations:
    """Rescale an accumulator, apply the folded affine and activation, and
    re-quantize to uint8 after clamping to [0, 1]."""
    real = acc.dequantize()
    if scale is not None:
        real = real * scale
    if shift is not None:
        real = real + shift
    if leaky:
        real = leaky_relu(real, slope)
    return QuantizedActivations(quantize_activation(np.clip(real, 0.0, 1.0)))


def _pool_windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    if stride == 1:
        # same-size output; edge replication never changes a window max
        x = np.pad(x, ((0, k - 1), (0, k - 1), (0, 0)), mode="edge")
    if x.shape[0] < k or x.shape[1] < k:
        raise ShapeError(f"pool window {k} larger than input {x.shape}")
    win = sliding_window_view(x, (k, k), axis=(0, 1))
    return win[::stride, ::stride].max(axis=(-2, -1))


def qmaxpool(act: QuantizedActivations, k: int, stride: int) -> QuantizedActivations:
    if act.values.ndim != 3:
        raise ShapeError(f"expected (rows, cols, channels), got {act.values.shape}")
    return QuantizedActivations(_pool_windows(act.values, k, stride))


def maxpool_float(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    if x.ndim != 3:
        raise ShapeError(f"expected (rows, cols, channels), got {x.shape}")
    return _pool_windows(x, k, stride)


def conv2d_float(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Real-valued convolution with the same layout as ``qconv2d``."""
    if x.ndim != 3 or w.ndim != 4 or x.shape[2] != w.shape[2]:
        raise ShapeMismatch(f"cannot convolve {x.shape} with kernel {w.shape}")
    kh, kw, _, z = w.shape
    ho = _out_size(x.shape[0], kh, stride, pad)
    wo = _out_size(x.shape[1], kw, stride, pad)
    dtype = np.result_type(x, w)
    cols = _im2col(np.pad(x, ((pad, pad), (pad, pad), (0, 0))), kh, kw, stride, ho, wo, dtype)
    return (cols @ w.reshape(-1, z)).reshape(ho, wo, z)
