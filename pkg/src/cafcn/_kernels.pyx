# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution and pooling kernels.

All arrays are C-contiguous float64 in height x width x channel layout;
weights are kernel_h x kernel_w x in_channels x out_channels.  The pure
numpy twin lives in ``_kernels_py`` and must stay numerically equivalent.
"""

import numpy as np
cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

BACKEND = "cython"


cdef void _im2col(const double[:, :, ::1] x, double[:, ::1] cols, Py_ssize_t KH, Py_ssize_t KW,
                  int stride, int pad, Py_ssize_t HO, Py_ssize_t WO) noexcept nogil:
    # cols[(oy*WO + ox), (ky*KW + kx)*C + ci]; out-of-range taps stay zero
    cdef Py_ssize_t H = x.shape[0], W = x.shape[1], C = x.shape[2]
    cdef Py_ssize_t oy, ox, ky, kx, ci, iy, ix, r, base
    for oy in range(HO):
        for ox in range(WO):
            r = oy * WO + ox
            for ky in range(KH):
                iy = oy * stride - pad + ky
                if iy < 0 or iy >= H:
                    continue
                for kx in range(KW):
                    ix = ox * stride - pad + kx
                    if ix < 0 or ix >= W:
                        continue
                    base = (ky * KW + kx) * C
                    for ci in range(C):
                        cols[r, base + ci] = x[iy, ix, ci]


cdef void _gemm(char ta, char tb, int m, int n, int k, const double *a, int lda,
                const double *b, int ldb, double beta, double *c, int ldc) noexcept nogil:
    # column-major dgemm: c = op(a) op(b) + beta c
    cdef double one = 1.0
    if m == 0 or n == 0 or k == 0:
        return  # callers pre-fill c, so an empty product is a no-op
    dgemm(&ta, &tb, &m, &n, &k, &one, <double *>a, &lda, <double *>b, &ldb, &beta, c, &ldc)


def conv2d_forward(const double[:, :, ::1] x, const double[:, :, :, ::1] w,
                   const double[::1] b, int stride, int pad):
    cdef Py_ssize_t H = x.shape[0], W = x.shape[1], C = x.shape[2]
    cdef Py_ssize_t KH = w.shape[0], KW = w.shape[1], CO = w.shape[3]
    cdef Py_ssize_t HO = (H + 2 * pad - KH) // stride + 1
    cdef Py_ssize_t WO = (W + 2 * pad - KW) // stride + 1
    cdef Py_ssize_t K = KH * KW * C, P = HO * WO
    out_arr = np.empty((HO, WO, CO), dtype=np.float64)
    cols_arr = np.zeros((P, K), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, ::1] cols = cols_arr
    cdef Py_ssize_t oy, ox, co
    with nogil:
        for oy in range(HO):
            for ox in range(WO):
                for co in range(CO):
                    out[oy, ox, co] = b[co]
        _im2col(x, cols, KH, KW, stride, pad, HO, WO)
        # out (P x CO) += cols (P x K) . w (K x CO), row-major
        _gemm(b'N', b'N', CO, P, K, &w[0, 0, 0, 0], CO, &cols[0, 0], K, 1.0, &out[0, 0, 0], CO)
    return out_arr


def conv2d_grad_input(const double[:, :, ::1] g, const double[:, :, :, ::1] w,
                      int stride, int pad, Py_ssize_t H, Py_ssize_t W):
    """Scatter ``g`` back through the kernel; also the transposed convolution."""
    cdef Py_ssize_t HO = g.shape[0], WO = g.shape[1], CO = g.shape[2]
    cdef Py_ssize_t KH = w.shape[0], KW = w.shape[1], C = w.shape[2]
    cdef Py_ssize_t K = KH * KW * C, P = HO * WO
    gx_arr = np.zeros((H, W, C), dtype=np.float64)
    cols_arr = np.empty((P, K), dtype=np.float64)
    cdef double[:, :, ::1] gx = gx_arr
    cdef double[:, ::1] cols = cols_arr
    cdef Py_ssize_t oy, ox, ky, kx, ci, iy, ix, r, base
    with nogil:
        # cols (P x K) = g (P x CO) . w^T (CO x K)
        _gemm(b'T', b'N', K, P, CO, &w[0, 0, 0, 0], CO, &g[0, 0, 0], CO, 0.0, &cols[0, 0], K)
        for oy in range(HO):
            for ox in range(WO):
                r = oy * WO + ox
                for ky in range(KH):
                    iy = oy * stride - pad + ky
                    if iy < 0 or iy >= H:
                        continue
                    for kx in range(KW):
                        ix = ox * stride - pad + kx
                        if ix < 0 or ix >= W:
                            continue
                        base = (ky * KW + kx) * C
                        for ci in range(C):
                            gx[iy, ix, ci] += cols[r, base + ci]
    return gx_arr


def conv2d_grad_weight(const double[:, :, ::1] x, const double[:, :, ::1] g,
                       Py_ssize_t KH, Py_ssize_t KW, int stride, int pad):
    cdef Py_ssize_t C = x.shape[2]
    cdef Py_ssize_t HO = g.shape[0], WO = g.shape[1], CO = g.shape[2]
    cdef Py_ssize_t K = KH * KW * C, P = HO * WO
    gw_arr = np.zeros((KH, KW, C, CO), dtype=np.float64)
    cols_arr = np.zeros((P, K), dtype=np.float64)
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef double[:, ::1] cols = cols_arr
    with nogil:
        _im2col(x, cols, KH, KW, stride, pad, HO, WO)
        # gw (K x CO) = cols^T (K x P) . g (P x CO)
        _gemm(b'N', b'T', CO, K, P, &g[0, 0, 0], CO, &cols[0, 0], K, 0.0, &gw[0, 0, 0, 0], CO)
    return gw_arr


def maxpool2_forward(const double[:, :, ::1] x):
    cdef Py_ssize_t H = x.shape[0], W = x.shape[1], C = x.shape[2]
    cdef Py_ssize_t HO = H // 2, WO = W // 2
    out_arr = np.empty((HO, WO, C), dtype=np.float64)
    idx_arr = np.empty((HO, WO, C), dtype=np.intp)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t[:, :, ::1] idx = idx_arr
    cdef Py_ssize_t oy, ox, c, k, best
    cdef double m, v
    with nogil:
        for oy in range(HO):
            for ox in range(WO):
                for c in range(C):
                    m = x[2 * oy, 2 * ox, c]
                    best = 0
                    for k in range(1, 4):
                        v = x[2 * oy + k // 2, 2 * ox + k % 2, c]
                        # strict comparison keeps the first maximum on ties
                        if v > m:
                            m = v
                            best = k
                    out[oy, ox, c] = m
                    idx[oy, ox, c] = best
    return out_arr, idx_arr


def maxpool2_backward(const double[:, :, ::1] g, const Py_ssize_t[:, :, ::1] idx):
    cdef Py_ssize_t HO = g.shape[0], WO = g.shape[1], C = g.shape[2]
    gx_arr = np.zeros((2 * HO, 2 * WO, C), dtype=np.float64)
    cdef double[:, :, ::1] gx = gx_arr
    cdef Py_ssize_t oy, ox, c, k
    with nogil:
        for oy in range(HO):
            for ox in range(WO):
                for c in range(C):
                    k = idx[oy, ox, c]
                    gx[2 * oy + k // 2, 2 * ox + k % 2, c] = g[oy, ox, c]
    return gx_arr
