"""Raw numpy kernels for convolution and bilinear resampling.

These are the dtype-preserving building blocks the autodiff layer wraps.
Convolution uses the cross-correlation convention (no kernel flip) and
im2col + one BLAS matmul; the input gradient doubles as the forward pass of
the transposed convolution, which makes the adjoint identity
``<conv(x), y> == <x, convT(y)>`` hold to rounding error by construction.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError


def same_padding(size: int, k: int, stride: int) -> tuple[int, int]:
    """(before, after) zero padding so that out = ceil(size / stride)."""
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def conv_out_size(size: int, k: int, stride: int, pad: str) -> int:
    if pad == "same":
        return -(-size // stride)
    if pad == "valid":
        if size < k:
            raise ContractError(f"valid conv needs size >= kernel, got {size} < {k}")
        return (size - k) // stride + 1
    raise ContractError(f"pad must be 'same' or 'valid', got {pad!r}")


def _check_conv_args(x, w, stride):
    if x.ndim != 4 or w.ndim != 4:
        raise ContractError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    if w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ContractError(f"kernel must be square with odd side, got {w.shape[2]}x{w.shape[3]}")
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    if x.shape[1] != w.shape[1]:
        raise ContractError(f"channel mismatch: input has {x.shape[1]}, weight expects {w.shape[1]}")


def _pad_amounts(x_shape, k, stride, pad):
    _, _, h, w = x_shape
    if pad == "same":
        return same_padding(h, k, stride), same_padding(w, k, stride)
    if pad == "valid":
        return (0, 0), (0, 0)
    raise ContractError(f"pad must be 'same' or 'valid', got {pad!r}")


def _im2col(x, k, stride, pad):
    """Return (cols, out_h, out_w); cols has shape [B*out_h*out_w, Cin*k*k]."""
    (pt, pb), (pl, pr) = _pad_amounts(x.shape, k, stride, pad)
    if pt or pb or pl or pr:
        x = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    b, ci, oh, ow = win.shape[:4]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * oh * ow, ci * k * k)
    return cols, oh, ow


def conv2d_fwd(x: np.ndarray, w: np.ndarray, stride: int, pad: str) -> np.ndarray:
    """Cross-correlate x[B,Ci,H,W] with w[Co,Ci,k,k]."""
    _check_conv_args(x, w, stride)
    k = w.shape[2]
    cols, oh, ow = _im2col(x, k, stride, pad)
    y = cols @ w.reshape(w.shape[0], -1).T
    return y.reshape(x.shape[0], oh, ow, w.shape[0]).transpose(0, 3, 1, 2)


def conv2d_grad_w(x: np.ndarray, gy: np.ndarray, k: int, stride: int, pad: str) -> np.ndarray:
    """Gradient of conv2d_fwd w.r.t. the weight."""
    cols, oh, ow = _im2col(x, k, stride, pad)
    g = gy.transpose(0, 2, 3, 1).reshape(-1, gy.shape[1])
    gw = g.T @ cols
    return gw.reshape(gy.shape[1], x.shape[1], k, k)


def conv2d_grad_x(gy: np.ndarray, w: np.ndarray, stride: int, pad: str,
                  x_hw: tuple[int, int]) -> np.ndarray:
    """Gradient of conv2d_fwd w.r.t. the input (the exact adjoint map).

    ``x_hw`` is the spatial size of the input whose gradient is produced.
    """
    b, co, oh, ow = gy.shape
    ci, k = w.shape[1], w.shape[2]
    h, wd = x_hw
    (pt, _), (pl, _) = _pad_amounts((b, ci, h, wd), k, stride, pad)
    g = gy.transpose(0, 2, 3, 1).reshape(-1, co)
    gcols = g @ w.reshape(co, -1)
    gcols = gcols.reshape(b, oh, ow, ci, k, k).transpose(0, 3, 4, 5, 1, 2)
    hp = max(h + pt, (oh - 1) * stride + k)
    wp = max(wd + pl, (ow - 1) * stride + k)
    gx = np.zeros((b, ci, hp, wp), dtype=gy.dtype)
    for i in range(k):
        for j in range(k):
            gx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += gcols[:, :, i, j]
    return gx[:, :, pt:pt + h, pl:pl + wd]


def conv2d_transpose_fwd(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """Adjoint of the stride-``stride`` "same" conv with the same weight.

    x[B,Co,h,w] with w[Co,Ci,k,k] -> [B,Ci,h*stride,w*stride].
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ContractError(f"conv2d_transpose expects 4-D input and weight, got {x.shape} and {w.shape}")
    if w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ContractError(f"kernel must be square with odd side, got {w.shape[2]}x{w.shape[3]}")
    if x.shape[1] != w.shape[0]:
        raise ContractError(f"channel mismatch: input has {x.shape[1]}, weight expects {w.shape[0]}")
    if stride not in (1, 2):
        raise ContractError(f"conv2d_transpose stride must be 1 or 2, got {stride}")
    h, wd = x.shape[2] * stride, x.shape[3] * stride
    return conv2d_grad_x(x, w, stride, "same", (h, wd))


def bilinear_matrix(n_out: int, n_in: int, dtype=np.float32) -> np.ndarray:
    """Align-corners 1-D interpolation matrix of shape [n_out, n_in]."""
    if n_out < 1 or n_in < 1:
        raise ContractError("resample target must be at least 1x1")
    a = np.zeros((n_out, n_in), dtype=dtype)
    if n_out == 1:
        a[0, 0] = 1.0
        return a
    scale = (n_in - 1) / (n_out - 1)
    for i in range(n_out):
        src = i * scale
        i0 = min(int(math.floor(src)), n_in - 1)
        f = src - i0
        a[i, i0] += 1.0 - f
        a[i, min(i0 + 1, n_in - 1)] += f
    return a


def bilinear_fwd(x: np.ndarray, a_h: np.ndarray, a_w: np.ndarray) -> np.ndarray:
    """Separable resample: a_h @ x @ a_w.T over the trailing two axes."""
    return np.matmul(np.matmul(a_h, x), a_w.T)


def bilinear_grad(gy: np.ndarray, a_h: np.ndarray, a_w: np.ndarray) -> np.ndarray:
    return np.matmul(np.matmul(a_h.T, gy), a_w)
