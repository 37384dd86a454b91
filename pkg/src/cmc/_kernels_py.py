"""Pure-numpy conv2d kernels with the same contract as the compiled core."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d_forward(xp, w, b):
    kh, kw = w.shape[:2]
    # (N, Ho, Wo, C, KH, KW)
    patches = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return np.einsum("nijcab,abcf->nijf", patches, w, optimize=True) + b


def conv2d_backward(xp, w, gy, need_gx=True):
    kh, kw = w.shape[:2]
    patches = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    gw = np.einsum("nijcab,nijf->abcf", patches, gy, optimize=True)
    gb = gy.sum(axis=(0, 1, 2))
    if not need_gx:
        return None, gw, gb
    # full correlation of gy with the flipped kernel
    gyp = np.pad(gy, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
    gpatches = sliding_window_view(gyp, (kh, kw), axis=(1, 2))
    gxp = np.einsum("nijfab,abcf->nijc", gpatches, w[::-1, ::-1], optimize=True)
    return gxp, gw, gb
