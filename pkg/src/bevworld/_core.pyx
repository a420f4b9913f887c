# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled convolution kernels: C-side im2col/col2im around direct BLAS
dgemm calls. Same interface as `_kernels_py`, minus that path's Python-level
padding and striding overhead.
"""

import numpy as np
cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline int _imax(int a, int b) nogil:
    return a if a > b else b


cdef inline int _imin(int a, int b) nogil:
    return a if a < b else b


cdef inline int _ceil_div(int a, int b) nogil:
    # exact ceil for a > -b under C truncating division; callers clamp at 0
    return (a + b - 1) // b


cdef void _im2col(const double[:, :, ::1] xv, double[:, ::1] col,
                  int kh, int kw, int stride, int pad,
                  int oh, int ow) nogil:
    """col[(ci*kh+i)*kw+j, oi*ow+oj] = x[ci, oi*s+i-pad, oj*s+j-pad] (0 outside)."""
    cdef int c = xv.shape[0], h = xv.shape[1], wd = xv.shape[2]
    cdef int ci, i, j, oi, oj, row, oi_lo, oi_hi, oj_lo, oj_hi, ii, jbase
    cdef double *crow
    cdef const double *xrow
    for ci in range(c):
        for i in range(kh):
            oi_lo = _imax(0, _ceil_div(pad - i, stride))
            oi_hi = _imin(oh, (h - 1 - i + pad) // stride + 1)
            for j in range(kw):
                row = (ci * kh + i) * kw + j
                jbase = j - pad
                oj_lo = _imax(0, _ceil_div(pad - j, stride))
                oj_hi = _imin(ow, (wd - 1 - j + pad) // stride + 1)
                if stride == 1:
                    for oi in range(oi_lo, oi_hi):
                        crow = &col[row, oi * ow]
                        xrow = &xv[ci, oi + i - pad, jbase]
                        for oj in range(oj_lo, oj_hi):
                            crow[oj] = xrow[oj]
                else:
                    for oi in range(oi_lo, oi_hi):
                        ii = oi * stride + i - pad
                        crow = &col[row, oi * ow]
                        for oj in range(oj_lo, oj_hi):
                            crow[oj] = xv[ci, ii, oj * stride + jbase]


cdef void _col2im(const double[:, ::1] col, double[:, :, ::1] gx,
                  int kh, int kw, int stride, int pad,
                  int oh, int ow) nogil:
    """Scatter-add transpose of _im2col."""
    cdef int c = gx.shape[0], h = gx.shape[1], wd = gx.shape[2]
    cdef int ci, i, j, oi, oj, row, oi_lo, oi_hi, oj_lo, oj_hi, ii, jbase
    cdef const double *crow
    cdef double *xrow
    for ci in range(c):
        for i in range(kh):
            oi_lo = _imax(0, _ceil_div(pad - i, stride))
            oi_hi = _imin(oh, (h - 1 - i + pad) // stride + 1)
            for j in range(kw):
                row = (ci * kh + i) * kw + j
                jbase = j - pad
                oj_lo = _imax(0, _ceil_div(pad - j, stride))
                oj_hi = _imin(ow, (wd - 1 - j + pad) // stride + 1)
                if stride == 1:
                    for oi in range(oi_lo, oi_hi):
                        crow = &col[row, oi * ow]
                        xrow = &gx[ci, oi + i - pad, jbase]
                        for oj in range(oj_lo, oj_hi):
                            xrow[oj] += crow[oj]
                else:
                    for oi in range(oi_lo, oi_hi):
                        ii = oi * stride + i - pad
                        crow = &col[row, oi * ow]
                        for oj in range(oj_lo, oj_hi):
                            gx[ci, ii, oj * stride + jbase] += crow[oj]


cdef void _matmul(const double[:, ::1] a, const double[:, ::1] b, double[:, ::1] out,
                  bint trans_a, bint trans_b) nogil:
    """out = op(a) @ op(b) for C-ordered inputs via Fortran dgemm on the
    swapped operands (row-major trick: C = A B  <=>  C^T = B^T A^T)."""
    cdef int m = out.shape[0], n_ = out.shape[1]
    cdef int k = (a.shape[0] if trans_a else a.shape[1])
    cdef char ta = b't' if trans_a else b'n'
    cdef char tb = b't' if trans_b else b'n'
    cdef double one = 1.0, zero = 0.0
    cdef int lda = a.shape[1], ldb = b.shape[1], ldc = out.shape[1]
    # Fortran view: compute out^T = op(b)^T @ op(a)^T
    dgemm(&tb, &ta, &n_, &m, &k, &one,
          <double*> &b[0, 0], &ldb,
          <double*> &a[0, 0], &lda,
          &zero, &out[0, 0], &ldc)


def conv2d_forward(x, w, b, int stride, int pad):
    cdef cnp.ndarray[double, ndim=3] xa = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=4] wa = np.ascontiguousarray(w, dtype=np.float64)
    cdef int c = xa.shape[0], h = xa.shape[1], wd = xa.shape[2]
    cdef int f = wa.shape[0], kh = wa.shape[2], kw = wa.shape[3]
    cdef int oh = (h + 2 * pad - kh) // stride + 1
    cdef int ow = (wd + 2 * pad - kw) // stride + 1
    cdef int ckk = c * kh * kw
    col_arr = np.zeros((ckk, oh * ow))
    out = np.empty((f, oh * ow))
    cdef double[:, ::1] col = col_arr
    cdef double[:, ::1] ov = out
    cdef double[:, ::1] wflat = wa.reshape(f, ckk)
    cdef const double[:, :, ::1] xmv = xa
    with nogil:
        _im2col(xmv, col, kh, kw, stride, pad, oh, ow)
        _matmul(wflat, col, ov, False, False)
    out = out.reshape(f, oh, ow)
    if b is not None:
        out += np.asarray(b)[:, None, None]
    return out


def conv2d_grad_weights(gout, x, int stride, int pad, int kh, int kw):
    cdef cnp.ndarray[double, ndim=3] ga = np.ascontiguousarray(gout, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=3] xa = np.ascontiguousarray(x, dtype=np.float64)
    cdef int f = ga.shape[0], oh = ga.shape[1], ow = ga.shape[2]
    cdef int c = xa.shape[0]
    cdef int ckk = c * kh * kw
    col_arr = np.zeros((ckk, oh * ow))
    gw = np.empty((f, ckk))
    cdef double[:, ::1] col = col_arr
    cdef double[:, ::1] gwv = gw
    cdef double[:, ::1] gflat = ga.reshape(f, oh * ow)
    cdef const double[:, :, ::1] xmv = xa
    with nogil:
        _im2col(xmv, col, kh, kw, stride, pad, oh, ow)
        _matmul(gflat, col, gwv, False, True)
    return gw.reshape(f, c, kh, kw)


def conv2d_grad_input(gout, w, int stride, int pad, int in_h, int in_w):
    cdef cnp.ndarray[double, ndim=3] ga = np.ascontiguousarray(gout, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=4] wa = np.ascontiguousarray(w, dtype=np.float64)
    cdef int f = ga.shape[0], oh = ga.shape[1], ow = ga.shape[2]
    cdef int c = wa.shape[1], kh = wa.shape[2], kw = wa.shape[3]
    cdef int ckk = c * kh * kw
    colg = np.empty((ckk, oh * ow))
    gx = np.zeros((c, in_h, in_w))
    cdef double[:, ::1] colv = colg
    cdef double[:, :, ::1] gxv = gx
    cdef double[:, ::1] wflat = wa.reshape(f, ckk)
    cdef double[:, ::1] gflat = ga.reshape(f, oh * ow)
    with nogil:
        _matmul(wflat, gflat, colv, True, False)
        _col2im(colv, gxv, kh, kw, stride, pad, oh, ow)
    return gx
