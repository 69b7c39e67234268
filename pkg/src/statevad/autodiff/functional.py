"""Convolution, pooling and normalization operations on NCHW tensors."""

from __future__ import annotations

import numpy as np

from . import _kernels
from .tensor import ShapeError, Tensor, make_result

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
GN_EPS = 1e-5


def _nchw(x: Tensor, name: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} expects a 4-d (B, C, H, W) input, got shape {x.shape}")


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (B, C_in, H, W) with ``kernel`` (C_out, C_in, k, k)."""
    _nchw(x, "conv2d")
    c_out, c_in, k, k2 = kernel.shape
    B, C, H, W = x.shape
    if C != c_in:
        raise ShapeError(f"conv2d: input has C_in={C} but kernel expects C_in={c_in}")
    if k != k2 or k < 1:
        raise ShapeError(f"conv2d: kernel must be square with k >= 1, got {kernel.shape[2:]}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: need stride >= 1 and padding >= 0, got {stride}, {padding}")
    if H + 2 * padding < k or W + 2 * padding < k:
        raise ShapeError(f"conv2d: padded input {H}x{W} (+{padding}) smaller than kernel {k}")
    Ho, Wo = conv_output_size(H, k, stride, padding), conv_output_size(W, k, stride, padding)

    cols = _kernels.columns(x.data, k, stride, padding, Ho, Wo)
    wmat = _kernels.kernel_matrix(kernel.data)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, c_out).transpose(0, 3, 1, 2))

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gx = gk = gb = None
        if x.requires_grad:
            gx = _kernels.image(gm @ wmat, x.shape, k, stride, padding, Ho, Wo)
        if kernel.requires_grad:
            gk = _kernels.kernel_from_matrix(gm.T @ cols, kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=0)
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result(out, parents, backward, "conv2d")


def conv_transpose2d(
    x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """Transposed convolution, the input-adjoint of :func:`conv2d`.

    ``kernel`` has shape (C_in, C_out, k, k). Output extent is
    ``(h - 1) * stride - 2 * padding + k``.
    """
    _nchw(x, "conv_transpose2d")
    c_in, c_out, k, k2 = kernel.shape
    B, C, h, w = x.shape
    if C != c_in:
        raise ShapeError(f"conv_transpose2d: input has C_in={C} but kernel expects C_in={c_in}")
    if k != k2 or k < 1 or stride < 1 or padding < 0:
        raise ValueError(f"conv_transpose2d: invalid k={kernel.shape[2:]}, stride={stride}, padding={padding}")
    if padding >= k:
        raise ShapeError(f"conv_transpose2d: padding {padding} >= kernel {k} cannot be inverted by a conv")
    H = (h - 1) * stride - 2 * padding + k
    W = (w - 1) * stride - 2 * padding + k
    if H < 1 or W < 1:
        raise ShapeError(f"conv_transpose2d: non-positive output extent {H}x{W}")
    if conv_output_size(H, k, stride, padding) != h or conv_output_size(W, k, stride, padding) != w:
        raise ShapeError("conv_transpose2d: configuration is not the inverse of a conv2d shape map")

    xm = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(-1, c_in)
    wmat = _kernels.kernel_matrix(kernel.data)
    out = _kernels.image(xm @ wmat, (B, c_out, H, W), k, stride, padding, h, w)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)

    def backward(g):
        gcols = _kernels.columns(g, k, stride, padding, h, w)
        gx = gk = gb = None
        if x.requires_grad:
            gx = np.ascontiguousarray((gcols @ wmat.T).reshape(B, h, w, c_in).transpose(0, 3, 1, 2))
        if kernel.requires_grad:
            gk = _kernels.kernel_from_matrix(xm.T @ gcols, kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result(out, parents, backward, "conv_transpose2d")


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max-pool with stride 2; gradient goes to the first row-major maximum."""
    _nchw(x, "maxpool2d")
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2d needs even spatial extents, got {H}x{W}")
    windows = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros(windows.shape, dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = gw.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (gx,)

    return make_result(np.ascontiguousarray(out), (x,), backward, "maxpool2d")


def _normalize_backward(g, xhat, invstd, axes, n):
    # gradient of xhat = (x - mean) * invstd w.r.t. x, with mean/var over ``axes``
    gsum = g.sum(axis=axes, keepdims=True)
    gxsum = (g * xhat).sum(axis=axes, keepdims=True)
    return invstd * (g - gsum / n - xhat * gxsum / n)


def batch_norm(
    x: Tensor,
    weight: Tensor,
    bias: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel normalization over (B, H, W).

    In training mode the batch statistics are used and the running buffers
    are updated in place (unbiased variance, as is customary). In eval mode
    only the running buffers are used.
    """
    _nchw(x, "batch_norm")
    B, C, H, W = x.shape
    shape = (1, C, 1, 1)
    gamma = weight.data.reshape(shape)
    beta = bias.data.reshape(shape)
    if training:
        n = B * H * W
        if n < 2:
            raise ShapeError("batch_norm in training mode needs at least 2 values per channel")
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        var = x.data.var(axis=(0, 2, 3), keepdims=True)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(-1) * (n / (n - 1))
    else:
        mu = running_mean.reshape(shape).astype(x.dtype)
        var = running_var.reshape(shape).astype(x.dtype)
    invstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu) * invstd
    out = xhat * gamma + beta

    def backward(g):
        gx = None
        if x.requires_grad:
            gxhat = g * gamma
            gx = _normalize_backward(gxhat, xhat, invstd, (0, 2, 3), n) if training else gxhat * invstd
        gw = (g * xhat).sum(axis=(0, 2, 3)) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return gx, gw, gb

    return make_result(out, (x, weight, bias), backward, "batch_norm")


def group_norm(x: Tensor, groups: int, weight: Tensor, bias: Tensor, eps: float = GN_EPS) -> Tensor:
    """Normalize each sample over every group's (channels, H, W) slice."""
    _nchw(x, "group_norm")
    B, C, H, W = x.shape
    if groups < 1 or C % groups:
        raise ShapeError(f"group_norm: C={C} is not divisible by groups={groups}")
    xg = x.data.reshape(B, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    invstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (xg - mu) * invstd
    gamma = weight.data.reshape(1, C, 1, 1)
    out = xhat.reshape(B, C, H, W) * gamma + bias.data.reshape(1, C, 1, 1)
    n = xg.shape[2]

    def backward(g):
        gx = None
        if x.requires_grad:
            gxhat = (g * gamma).reshape(B, groups, -1)
            gx = _normalize_backward(gxhat, xhat, invstd, (2,), n).reshape(B, C, H, W)
        xh = xhat.reshape(B, C, H, W)
        gw = (g * xh).sum(axis=(0, 2, 3)) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return gx, gw, gb

    return make_result(out, (x, weight, bias), backward, "group_norm")
