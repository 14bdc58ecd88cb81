"""Pure numpy kernels, used when the compiled extension is unavailable.

Same contract as the Cython module: C-contiguous float64 arrays in
height x width x channel layout.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND = "numpy"


def _patches(xp, kh, kw, stride, ho, wo):
    # (H, W, C) -> (HO, WO, kh, kw, C) view
    win = sliding_window_view(xp, (kh, kw), axis=(0, 1))
    win = win[: (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return win.transpose(0, 1, 3, 4, 2)


def conv2d_forward(x, w, b, stride, pad):
    h, wd, _ = x.shape
    kh, kw, _, _ = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0))) if pad else x
    cols = _patches(xp, kh, kw, stride, ho, wo)
    out = np.tensordot(cols, w, axes=([2, 3, 4], [0, 1, 2]))
    out += b
    return np.ascontiguousarray(out)


def conv2d_grad_input(g, w, stride, pad, h, wd):
    ho, wo, _ = g.shape
    kh, kw, c, _ = w.shape
    cols = np.tensordot(g, w, axes=([2], [3]))  # (HO, WO, kh, kw, C)
    hp = max(h + 2 * pad, (ho - 1) * stride + kh)
    wp = max(wd + 2 * pad, (wo - 1) * stride + kw)
    gxp = np.zeros((hp, wp, c))
    for ky in range(kh):
        for kx in range(kw):
            gxp[ky : ky + (ho - 1) * stride + 1 : stride,
                kx : kx + (wo - 1) * stride + 1 : stride] += cols[:, :, ky, kx]
    return np.ascontiguousarray(gxp[pad : pad + h, pad : pad + wd])


def conv2d_grad_weight(x, g, kh, kw, stride, pad):
    ho, wo, _ = g.shape
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0))) if pad else x
    cols = _patches(xp, kh, kw, stride, ho, wo)
    return np.ascontiguousarray(np.tensordot(cols, g, axes=([0, 1], [0, 1])))


def maxpool2_forward(x):
    h, w, c = x.shape
    win = x.reshape(h // 2, 2, w // 2, 2, c).transpose(0, 2, 4, 1, 3).reshape(h // 2, w // 2, c, 4)
    idx = np.argmax(win, axis=-1)  # first maximum wins
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), np.ascontiguousarray(idx.astype(np.intp))


def maxpool2_backward(g, idx):
    ho, wo, c = g.shape
    win = np.zeros((ho, wo, c, 4))
    np.put_along_axis(win, idx[..., None], g[..., None], axis=-1)
    gx = win.reshape(ho, wo, c, 2, 2).transpose(0, 3, 1, 4, 2).reshape(2 * ho, 2 * wo, c)
    return np.ascontiguousarray(gx)
