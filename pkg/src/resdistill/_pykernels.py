"""Pure numpy implementations of the convolution lowering kernels.

These are the reference/fallback versions of what ``_ckernels.pyx`` computes.
Both must produce bit-identical results: ``col2im`` accumulates the kernel
taps in row-major (ki, kj) order for every output cell.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, stride, padding):
    """Lower a (N, C, H, W) array to columns of shape (N, C*kh*kw, OH*OW)."""
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    # (N, C, OH, OW, kh, kw) -> (N, C, kh, kw, OH, OW)
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))
    return cols.reshape(n, c * kh * kw, oh * ow)


def col2im(cols, shape, kh, kw, stride, padding):
    """Adjoint of :func:`im2col`: scatter-add columns back onto an image."""
    n, c, h, w = shape
    hp, wp = h + 2 * padding, w + 2 * padding
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    out = np.zeros((n, c, hp, wp), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    if padding:
        out = out[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(out)
