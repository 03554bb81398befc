"""Numpy implementations of the convolution and pooling kernels.

Used when the compiled ``_kernels`` extension is unavailable, and as the
reference the compiled kernels are tested against.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x, kernel, stride):
    # (N, C, Ho, Wo, K, K) view, no copy
    return sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d_forward(x, w, b, stride):
    win = _windows(x, w.shape[2], stride)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, O)
    out = out.transpose(0, 3, 1, 2) + b[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward(x, w, dout, stride):
    """Return ``(dx, dw, db)`` for a valid (unpadded) convolution."""
    k = w.shape[2]
    ho, wo = dout.shape[2], dout.shape[3]
    win = _windows(x, k, stride)
    dw = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, K, K)
    db = dout.sum(axis=(0, 2, 3))
    dx = np.zeros_like(x)
    for i in range(k):
        for j in range(k):
            contrib = np.tensordot(dout, w[:, :, i, j], axes=([1], [0]))  # (N, Ho, Wo, C)
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib.transpose(0, 3, 1, 2)
    return dx, np.ascontiguousarray(dw), db


def maxpool2d_forward(x, window):
    """Non-overlapping max pooling; returns ``(out, argmax)``.

    ``argmax`` holds the within-window flat offset of the winner; ties go to
    the first (lowest) offset.
    """
    n, c, h, wd = x.shape
    ho, wo = h // window, wd // window
    blocks = x[:, :, :ho * window, :wo * window].reshape(n, c, ho, window, wo, window)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, window * window)
    arg = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg.astype(np.int64)


def maxpool2d_backward(dout, arg, input_shape, window):
    n, c, h, wd = input_shape
    ho, wo = dout.shape[2], dout.shape[3]
    blocks = np.zeros((n, c, ho, wo, window * window))
    np.put_along_axis(blocks, arg[..., None], dout[..., None], axis=-1)
    blocks = blocks.reshape(n, c, ho, wo, window, window).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros(input_shape)
    dx[:, :, :ho * window, :wo * window] = blocks.reshape(n, c, ho * window, wo * window)
    return dx
