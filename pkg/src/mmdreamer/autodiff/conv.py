"""Valid (unpadded) 2-D convolution and its exact adjoint."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError, ParameterError
from .core import Tensor, _maybe_record, as_tensor


def conv_output_size(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


def deconv_output_size(size: int, kernel: int, stride: int) -> int:
    return (size - 1) * stride + kernel


def _windows(x4: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (n, c, ho, wo, kh, kw) strided view
    win = sliding_window_view(x4, (kh, kw), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _conv_fwd(x4: np.ndarray, k: np.ndarray, stride: int) -> np.ndarray:
    _, _, h, w = x4.shape
    _, _, kh, kw = k.shape
    ho, wo = conv_output_size(h, kh, stride), conv_output_size(w, kw, stride)
    win = _windows(x4, kh, kw, stride, ho, wo)
    out = np.tensordot(win, k, axes=([1, 4, 5], [1, 2, 3]))  # n, ho, wo, o
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_adj(y4: np.ndarray, k: np.ndarray, stride: int, out_hw: tuple[int, int]) -> np.ndarray:
    n, _, ho, wo = y4.shape
    _, c, kh, kw = k.shape
    out = np.zeros((n, c) + tuple(out_hw))
    cols = np.tensordot(y4, k, axes=([1], [0]))  # n, ho, wo, c, kh, kw
    cols = cols.transpose(0, 3, 4, 5, 1, 2)  # n, c, kh, kw, ho, wo
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += cols[:, :, i, j]
    return out


def _kernel_grad(x4: np.ndarray, y4: np.ndarray, kshape: tuple, stride: int) -> np.ndarray:
    # d<conv(x,K), y>/dK
    _, _, kh, kw = kshape
    ho, wo = y4.shape[2:]
    win = _windows(x4, kh, kw, stride, ho, wo)
    return np.tensordot(y4, win, axes=([0, 2, 3], [0, 2, 3]))


def _as4(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise DimensionError(f"expected (c, h, w) or (n, c, h, w) input, got {x.shape}")


def conv2d(x, kernels, stride: int = 1, bias=None) -> Tensor:
    """Valid convolution of ``x`` (c,h,w) or (n,c,h,w) with kernels (o,c,kh,kw)."""
    x, k = as_tensor(x), as_tensor(kernels)
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    x4, squeeze = _as4(x)
    if k.ndim != 4 or k.shape[1] != x4.shape[1]:
        raise DimensionError(f"conv2d: kernels {k.shape} incompatible with input {x.shape}")
    kh, kw = k.shape[2:]
    h, w = x4.shape[2:]
    if kh > h or kw > w:
        raise DimensionError(f"conv2d: kernel {k.shape} larger than input {x.shape}")
    kd = k.data
    out = _conv_fwd(x4, kd, stride)
    inputs = [x, k]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (kd.shape[0],):
            raise DimensionError(f"conv2d: bias {bias.shape} does not match {kd.shape[0]} channels")
        out = out + bias.data[None, :, None, None]
        inputs.append(bias)

    def back(g):
        g4 = g[None] if squeeze else g
        gx = _conv_adj(g4, kd, stride, (h, w))
        gk = _kernel_grad(x4, g4, kd.shape, stride)
        grads = [gx[0] if squeeze else gx, gk]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _maybe_record(inputs, out[0] if squeeze else out, back)


def conv2d_transpose(y, kernels, stride: int = 1, bias=None, output_hw: tuple[int, int] | None = None) -> Tensor:
    """Adjoint of :func:`conv2d` for the same kernels (o,c,kh,kw).

    Maps (o,h',w') to (c,h,w) with h = (h'-1)*stride + kh unless ``output_hw``
    asks for a larger canvas (the rows conv2d would have ignored stay zero).
    """
    y, k = as_tensor(y), as_tensor(kernels)
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    y4, squeeze = _as4(y)
    if k.ndim != 4 or k.shape[0] != y4.shape[1]:
        raise DimensionError(f"conv2d_transpose: kernels {k.shape} incompatible with input {y.shape}")
    kd = k.data
    kh, kw = kd.shape[2:]
    hmin = deconv_output_size(y4.shape[2], kh, stride)
    wmin = deconv_output_size(y4.shape[3], kw, stride)
    if output_hw is None:
        output_hw = (hmin, wmin)
    if (conv_output_size(output_hw[0], kh, stride) != y4.shape[2]
            or conv_output_size(output_hw[1], kw, stride) != y4.shape[3]):
        raise DimensionError(f"conv2d_transpose: output size {output_hw} does not invert input {y.shape}")
    out = _conv_adj(y4, kd, stride, output_hw)
    inputs = [y, k]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (kd.shape[1],):
            raise DimensionError(f"conv2d_transpose: bias {bias.shape} does not match {kd.shape[1]} channels")
        out = out + bias.data[None, :, None, None]
        inputs.append(bias)

    def back(g):
        g4 = g[None] if squeeze else g
        gy = _conv_fwd(g4, kd, stride)
        gk = _kernel_grad(g4, y4, kd.shape, stride)
        grads = [gy[0] if squeeze else gy, gk]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _maybe_record(inputs, out[0] if squeeze else out, back)
