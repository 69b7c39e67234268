"""numba gather/scatter kernels for im2col-based convolution.

Columns are gathered from a channels-last copy of the input so the innermost
copy runs over contiguous channels. Column layout is (B, Ho, Wo, k, k, C)
flattened to (B*Ho*Wo, k*k*C); the matching kernel matrix is the
(C_out, C_in, k, k) kernel transposed to (C_out, k, k, C_in).
"""

import numba
import numpy as np


@numba.njit(cache=True, nogil=True)
def _im2col(x, k, stride, padding, Ho, Wo, out):
    B, H, W, C = x.shape
    for b in range(B):
        for oy in range(Ho):
            for ox in range(Wo):
                for i in range(k):
                    iy = oy * stride + i - padding
                    for j in range(k):
                        ix = ox * stride + j - padding
                        if iy < 0 or iy >= H or ix < 0 or ix >= W:
                            for c in range(C):
                                out[b, oy, ox, i, j, c] = 0.0
                        else:
                            for c in range(C):
                                out[b, oy, ox, i, j, c] = x[b, iy, ix, c]


@numba.njit(cache=True, nogil=True)
def _col2im(cols, k, stride, padding, out):
    B, H, W, C = out.shape
    Ho, Wo = cols.shape[1], cols.shape[2]
    for b in range(B):
        for oy in range(Ho):
            for ox in range(Wo):
                for i in range(k):
                    iy = oy * stride + i - padding
                    if iy < 0 or iy >= H:
                        continue
                    for j in range(k):
                        ix = ox * stride + j - padding
                        if ix < 0 or ix >= W:
                            continue
                        for c in range(C):
                            out[b, iy, ix, c] += cols[b, oy, ox, i, j, c]


def kernel_matrix(kernel: np.ndarray) -> np.ndarray:
    """(C_out, C_in, k, k) -> (C_out, k*k*C_in) in column order."""
    return np.ascontiguousarray(kernel.transpose(0, 2, 3, 1)).reshape(kernel.shape[0], -1)


def kernel_from_matrix(mat: np.ndarray, shape: tuple) -> np.ndarray:
    c_out, c_in, k, _ = shape
    return mat.reshape(c_out, k, k, c_in).transpose(0, 3, 1, 2)


def columns_nhwc(x: np.ndarray, k: int, stride: int, padding: int, Ho: int, Wo: int) -> np.ndarray:
    B, C = x.shape[0], x.shape[3]
    out = np.empty((B, Ho, Wo, k, k, C), dtype=x.dtype)
    _im2col(np.ascontiguousarray(x), k, stride, padding, Ho, Wo, out)
    return out.reshape(B * Ho * Wo, k * k * C)


def columns(x: np.ndarray, k: int, stride: int, padding: int, Ho: int, Wo: int) -> np.ndarray:
    """im2col of an NCHW array."""
    return columns_nhwc(x.transpose(0, 2, 3, 1), k, stride, padding, Ho, Wo)


def image_nhwc(cols: np.ndarray, shape_nhwc: tuple, k: int, stride: int, padding: int, Ho: int, Wo: int) -> np.ndarray:
    B, H, W, C = shape_nhwc
    out = np.zeros(shape_nhwc, dtype=cols.dtype)
    _col2im(np.ascontiguousarray(cols).reshape(B, Ho, Wo, k, k, C), k, stride, padding, out)
    return out


def image(cols: np.ndarray, shape: tuple, k: int, stride: int, padding: int, Ho: int, Wo: int) -> np.ndarray:
    """col2im (scatter-add) to an NCHW array of ``shape``."""
    B, C, H, W = shape
    out = image_nhwc(cols, (B, H, W, C), k, stride, padding, Ho, Wo)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))
