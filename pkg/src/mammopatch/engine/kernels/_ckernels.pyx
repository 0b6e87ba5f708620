# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: im2col/col2im, Winograd F(4x4,3x3) transforms (whole-array
and tile-block variants), fused conv-relu-pool passes, a small-channel direct 3x3
convolution, pooling, Adam, and the bilinear rotate used by augmentation.

Semantics match mammopatch.engine.kernels.pykernels. The *_block variants process
a contiguous tile range [t0, t1) against small scratch buffers so a caller can
pipeline transform -> GEMM -> transform while everything stays cache resident;
the heavy matrix products themselves run through numpy's BLAS in both backends.
"""

from libc.stdlib cimport free, malloc
from libc.math cimport cos, floor, fmax, fmaxf, sin, sqrt, sqrtf

import numpy as np

cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double

cdef double PI = 3.141592653589793


# ---------------------------------------------------------------------------
# im2col / col2im


def im2col(real[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t sy, Py_ssize_t sx):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t oh = (h - kh) // sy + 1, ow = (w - kw) // sx + 1
    out = np.empty((n * oh * ow, kh * kw * c), dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] cols = out
    cdef Py_ssize_t i, oy, ox, dy, col, row
    cdef const real* src
    cdef real* dst
    for i in range(n):
        for oy in range(oh):
            for ox in range(ow):
                row = (i * oh + oy) * ow + ox
                dst = &cols[row, 0]
                for dy in range(kh):
                    src = &x[i, oy * sy + dy, ox * sx, 0]
                    for col in range(kw * c):
                        dst[col] = src[col]
                    dst += kw * c
    return out


def col2im_add(real[:, ::1] dcols, Py_ssize_t n, Py_ssize_t h, Py_ssize_t w, Py_ssize_t c,
               Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t sy, Py_ssize_t sx):
    cdef Py_ssize_t oh = (h - kh) // sy + 1, ow = (w - kw) // sx + 1
    out = np.zeros((n, h, w, c), dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, ::1] dx = out
    cdef Py_ssize_t i, oy, ox, dy, col, row
    cdef const real* src
    cdef real* dst
    for i in range(n):
        for oy in range(oh):
            for ox in range(ow):
                row = (i * oh + oy) * ow + ox
                src = &dcols[row, 0]
                for dy in range(kh):
                    dst = &dx[i, oy * sy + dy, ox * sx, 0]
                    for col in range(kw * c):
                        dst[col] += src[col]
                    src += kw * c
    return out


# ---------------------------------------------------------------------------
# Winograd F(4x4, 3x3) per-tile transform primitives.
#
# Tiles are processed in channel slices of 16 with stack-local buffers: the
# intermediates can then never alias the big arrays, so the channel loops
# vectorize without runtime overlap checks. The 1D stages are the rows of
# B^T / A^T / B / A written out as explicit linear combinations; slices
# shorter than 16 are zero-padded on gather and masked on scatter.

DEF KTILE = 16


cdef void _input_tile16(const real* src, Py_ssize_t rs, Py_ssize_t cs,
                        real* dst, Py_ssize_t ks, int kc) noexcept nogil:
    """V-tile slice = B^T d B. src: tile top-left (slice base); dst: 36 rows at stride ks."""
    cdef real dt[36 * KTILE]
    cdef real t1[36 * KTILE]
    cdef int a, b, i, k
    cdef real a0, a1, a2, a3, a4, a5
    if kc == KTILE:
        for a in range(6):
            for b in range(6):
                for k in range(KTILE):
                    dt[(a * 6 + b) * KTILE + k] = src[a * rs + b * cs + k]
    else:
        for a in range(6):
            for b in range(6):
                for k in range(kc):
                    dt[(a * 6 + b) * KTILE + k] = src[a * rs + b * cs + k]
                for k in range(kc, KTILE):
                    dt[(a * 6 + b) * KTILE + k] = 0.0
    for b in range(6):
        for k in range(KTILE):
            a0 = dt[(0 * 6 + b) * KTILE + k]
            a1 = dt[(1 * 6 + b) * KTILE + k]
            a2 = dt[(2 * 6 + b) * KTILE + k]
            a3 = dt[(3 * 6 + b) * KTILE + k]
            a4 = dt[(4 * 6 + b) * KTILE + k]
            a5 = dt[(5 * 6 + b) * KTILE + k]
            t1[(0 * 6 + b) * KTILE + k] = 4.0 * a0 - 5.0 * a2 + a4
            t1[(1 * 6 + b) * KTILE + k] = -4.0 * a1 - 4.0 * a2 + a3 + a4
            t1[(2 * 6 + b) * KTILE + k] = 4.0 * a1 - 4.0 * a2 - a3 + a4
            t1[(3 * 6 + b) * KTILE + k] = -2.0 * a1 - a2 + 2.0 * a3 + a4
            t1[(4 * 6 + b) * KTILE + k] = 2.0 * a1 - a2 - 2.0 * a3 + a4
            t1[(5 * 6 + b) * KTILE + k] = 4.0 * a1 - 5.0 * a3 + a5
    if kc == KTILE:
        for i in range(6):
            for k in range(KTILE):
                a0 = t1[(i * 6 + 0) * KTILE + k]
                a1 = t1[(i * 6 + 1) * KTILE + k]
                a2 = t1[(i * 6 + 2) * KTILE + k]
                a3 = t1[(i * 6 + 3) * KTILE + k]
                a4 = t1[(i * 6 + 4) * KTILE + k]
                a5 = t1[(i * 6 + 5) * KTILE + k]
                dst[(i * 6 + 0) * ks + k] = 4.0 * a0 - 5.0 * a2 + a4
                dst[(i * 6 + 1) * ks + k] = -4.0 * a1 - 4.0 * a2 + a3 + a4
                dst[(i * 6 + 2) * ks + k] = 4.0 * a1 - 4.0 * a2 - a3 + a4
                dst[(i * 6 + 3) * ks + k] = -2.0 * a1 - a2 + 2.0 * a3 + a4
                dst[(i * 6 + 4) * ks + k] = 2.0 * a1 - a2 - 2.0 * a3 + a4
                dst[(i * 6 + 5) * ks + k] = 4.0 * a1 - 5.0 * a3 + a5
    else:
        for i in range(6):
            for k in range(kc):
                a0 = t1[(i * 6 + 0) * KTILE + k]
                a1 = t1[(i * 6 + 1) * KTILE + k]
                a2 = t1[(i * 6 + 2) * KTILE + k]
                a3 = t1[(i * 6 + 3) * KTILE + k]
                a4 = t1[(i * 6 + 4) * KTILE + k]
                a5 = t1[(i * 6 + 5) * KTILE + k]
                dst[(i * 6 + 0) * ks + k] = 4.0 * a0 - 5.0 * a2 + a4
                dst[(i * 6 + 1) * ks + k] = -4.0 * a1 - 4.0 * a2 + a3 + a4
                dst[(i * 6 + 2) * ks + k] = 4.0 * a1 - 4.0 * a2 - a3 + a4
                dst[(i * 6 + 3) * ks + k] = -2.0 * a1 - a2 + 2.0 * a3 + a4
                dst[(i * 6 + 4) * ks + k] = 2.0 * a1 - a2 - 2.0 * a3 + a4
                dst[(i * 6 + 5) * ks + k] = 4.0 * a1 - 5.0 * a3 + a5


cdef void _output_tile16(const real* msrc, Py_ssize_t ks, int kc, real* yt) noexcept nogil:
    """y-tile slice (4x4xKTILE) = A^T M A. msrc: 36 rows at stride ks (slice base)."""
    cdef real mt[36 * KTILE]
    cdef real t1[24 * KTILE]
    cdef int b, row, j, k
    cdef real m0, m1, m2, m3, m4, m5
    if kc == KTILE:
        for j in range(36):
            for k in range(KTILE):
                mt[j * KTILE + k] = msrc[j * ks + k]
    else:
        for j in range(36):
            for k in range(kc):
                mt[j * KTILE + k] = msrc[j * ks + k]
            for k in range(kc, KTILE):
                mt[j * KTILE + k] = 0.0
    for b in range(6):
        for k in range(KTILE):
            m0 = mt[(0 * 6 + b) * KTILE + k]
            m1 = mt[(1 * 6 + b) * KTILE + k]
            m2 = mt[(2 * 6 + b) * KTILE + k]
            m3 = mt[(3 * 6 + b) * KTILE + k]
            m4 = mt[(4 * 6 + b) * KTILE + k]
            m5 = mt[(5 * 6 + b) * KTILE + k]
            t1[(0 * 6 + b) * KTILE + k] = m0 + m1 + m2 + m3 + m4
            t1[(1 * 6 + b) * KTILE + k] = m1 - m2 + 2.0 * m3 - 2.0 * m4
            t1[(2 * 6 + b) * KTILE + k] = m1 + m2 + 4.0 * m3 + 4.0 * m4
            t1[(3 * 6 + b) * KTILE + k] = m1 - m2 + 8.0 * m3 - 8.0 * m4 + m5
    for row in range(4):
        for k in range(KTILE):
            m0 = t1[(row * 6 + 0) * KTILE + k]
            m1 = t1[(row * 6 + 1) * KTILE + k]
            m2 = t1[(row * 6 + 2) * KTILE + k]
            m3 = t1[(row * 6 + 3) * KTILE + k]
            m4 = t1[(row * 6 + 4) * KTILE + k]
            m5 = t1[(row * 6 + 5) * KTILE + k]
            yt[(row * 4 + 0) * KTILE + k] = m0 + m1 + m2 + m3 + m4
            yt[(row * 4 + 1) * KTILE + k] = m1 - m2 + 2.0 * m3 - 2.0 * m4
            yt[(row * 4 + 2) * KTILE + k] = m1 + m2 + 4.0 * m3 + 4.0 * m4
            yt[(row * 4 + 3) * KTILE + k] = m1 - m2 + 8.0 * m3 - 8.0 * m4 + m5


cdef void _doutput_tile16(const real* dyt, real* dst, Py_ssize_t ks, int kc) noexcept nogil:
    """dM-tile slice = A dY A^T. dyt: packed 4x4xKTILE; dst: 36 rows at stride ks."""
    cdef real t1[24 * KTILE]
    cdef int b, row, k
    cdef real d0, d1, d2, d3
    for b in range(4):
        for k in range(KTILE):
            d0 = dyt[(0 * 4 + b) * KTILE + k]
            d1 = dyt[(1 * 4 + b) * KTILE + k]
            d2 = dyt[(2 * 4 + b) * KTILE + k]
            d3 = dyt[(3 * 4 + b) * KTILE + k]
            t1[(0 * 4 + b) * KTILE + k] = d0
            t1[(1 * 4 + b) * KTILE + k] = d0 + d1 + d2 + d3
            t1[(2 * 4 + b) * KTILE + k] = d0 - d1 + d2 - d3
            t1[(3 * 4 + b) * KTILE + k] = d0 + 2.0 * d1 + 4.0 * d2 + 8.0 * d3
            t1[(4 * 4 + b) * KTILE + k] = d0 - 2.0 * d1 + 4.0 * d2 - 8.0 * d3
            t1[(5 * 4 + b) * KTILE + k] = d3
    if kc == KTILE:
        for row in range(6):
            for k in range(KTILE):
                d0 = t1[(row * 4 + 0) * KTILE + k]
                d1 = t1[(row * 4 + 1) * KTILE + k]
                d2 = t1[(row * 4 + 2) * KTILE + k]
                d3 = t1[(row * 4 + 3) * KTILE + k]
                dst[(row * 6 + 0) * ks + k] = d0
                dst[(row * 6 + 1) * ks + k] = d0 + d1 + d2 + d3
                dst[(row * 6 + 2) * ks + k] = d0 - d1 + d2 - d3
                dst[(row * 6 + 3) * ks + k] = d0 + 2.0 * d1 + 4.0 * d2 + 8.0 * d3
                dst[(row * 6 + 4) * ks + k] = d0 - 2.0 * d1 + 4.0 * d2 - 8.0 * d3
                dst[(row * 6 + 5) * ks + k] = d3
    else:
        for row in range(6):
            for k in range(kc):
                d0 = t1[(row * 4 + 0) * KTILE + k]
                d1 = t1[(row * 4 + 1) * KTILE + k]
                d2 = t1[(row * 4 + 2) * KTILE + k]
                d3 = t1[(row * 4 + 3) * KTILE + k]
                dst[(row * 6 + 0) * ks + k] = d0
                dst[(row * 6 + 1) * ks + k] = d0 + d1 + d2 + d3
                dst[(row * 6 + 2) * ks + k] = d0 - d1 + d2 - d3
                dst[(row * 6 + 3) * ks + k] = d0 + 2.0 * d1 + 4.0 * d2 + 8.0 * d3
                dst[(row * 6 + 4) * ks + k] = d0 - 2.0 * d1 + 4.0 * d2 - 8.0 * d3
                dst[(row * 6 + 5) * ks + k] = d3


cdef void _y2_cols16(const real* m, Py_ssize_t ms, real* y, Py_ssize_t ys,
                     int kc) noexcept nogil:
    """One 16-column panel of y2 = (A^T (x) A^T) m on 2-D row-major views."""
    cdef real yt[16 * KTILE]
    cdef int r, k
    _output_tile16(m, ms, kc, yt)
    if kc == KTILE:
        for r in range(16):
            for k in range(KTILE):
                y[r * ys + k] = yt[r * KTILE + k]
    else:
        for r in range(16):
            for k in range(kc):
                y[r * ys + k] = yt[r * KTILE + k]


cdef void _dm_cols16(const real* dy, Py_ssize_t ds, real* dst, Py_ssize_t ms,
                     int kc) noexcept nogil:
    """One 16-column panel of dm = (A (x) A) dy2 on 2-D row-major views."""
    cdef real dyt[16 * KTILE]
    cdef int r, k
    if kc == KTILE:
        for r in range(16):
            for k in range(KTILE):
                dyt[r * KTILE + k] = dy[r * ds + k]
    else:
        for r in range(16):
            for k in range(kc):
                dyt[r * KTILE + k] = dy[r * ds + k]
            for k in range(kc, KTILE):
                dyt[r * KTILE + k] = 0.0
    _doutput_tile16(dyt, dst, ms, kc)


cdef void _dinput_tile16(const real* vsrc, Py_ssize_t ks, int kc,
                         real* dxt, Py_ssize_t rs, Py_ssize_t cs) noexcept nogil:
    """Overlap-add B dV B^T of one tile slice onto dxt (tile top-left, slice base)."""
    cdef real vt[36 * KTILE]
    cdef real t1[36 * KTILE]
    cdef real dd[36 * KTILE]
    cdef int b, a, j, k
    cdef real v0, v1, v2, v3, v4, v5
    if kc == KTILE:
        for j in range(36):
            for k in range(KTILE):
                vt[j * KTILE + k] = vsrc[j * ks + k]
    else:
        for j in range(36):
            for k in range(kc):
                vt[j * KTILE + k] = vsrc[j * ks + k]
            for k in range(kc, KTILE):
                vt[j * KTILE + k] = 0.0
    for b in range(6):
        for k in range(KTILE):
            v0 = vt[(0 * 6 + b) * KTILE + k]
            v1 = vt[(1 * 6 + b) * KTILE + k]
            v2 = vt[(2 * 6 + b) * KTILE + k]
            v3 = vt[(3 * 6 + b) * KTILE + k]
            v4 = vt[(4 * 6 + b) * KTILE + k]
            v5 = vt[(5 * 6 + b) * KTILE + k]
            t1[(0 * 6 + b) * KTILE + k] = 4.0 * v0
            t1[(1 * 6 + b) * KTILE + k] = -4.0 * v1 + 4.0 * v2 - 2.0 * v3 + 2.0 * v4 + 4.0 * v5
            t1[(2 * 6 + b) * KTILE + k] = -5.0 * v0 - 4.0 * v1 - 4.0 * v2 - v3 - v4
            t1[(3 * 6 + b) * KTILE + k] = v1 - v2 + 2.0 * v3 - 2.0 * v4 - 5.0 * v5
            t1[(4 * 6 + b) * KTILE + k] = v0 + v1 + v2 + v3 + v4
            t1[(5 * 6 + b) * KTILE + k] = v5
    for a in range(6):
        for k in range(KTILE):
            v0 = t1[(a * 6 + 0) * KTILE + k]
            v1 = t1[(a * 6 + 1) * KTILE + k]
            v2 = t1[(a * 6 + 2) * KTILE + k]
            v3 = t1[(a * 6 + 3) * KTILE + k]
            v4 = t1[(a * 6 + 4) * KTILE + k]
            v5 = t1[(a * 6 + 5) * KTILE + k]
            dd[(a * 6 + 0) * KTILE + k] = 4.0 * v0
            dd[(a * 6 + 1) * KTILE + k] = -4.0 * v1 + 4.0 * v2 - 2.0 * v3 + 2.0 * v4 + 4.0 * v5
            dd[(a * 6 + 2) * KTILE + k] = -5.0 * v0 - 4.0 * v1 - 4.0 * v2 - v3 - v4
            dd[(a * 6 + 3) * KTILE + k] = v1 - v2 + 2.0 * v3 - 2.0 * v4 - 5.0 * v5
            dd[(a * 6 + 4) * KTILE + k] = v0 + v1 + v2 + v3 + v4
            dd[(a * 6 + 5) * KTILE + k] = v5
    if kc == KTILE:
        for a in range(6):
            for b in range(6):
                for k in range(KTILE):
                    dxt[a * rs + b * cs + k] += dd[(a * 6 + b) * KTILE + k]
    else:
        for a in range(6):
            for b in range(6):
                for k in range(kc):
                    dxt[a * rs + b * cs + k] += dd[(a * 6 + b) * KTILE + k]


cdef inline void _pool_tile16(const real* yt, const real* bias, int kc,
                              real* pooled_out, unsigned char* idx_out,
                              Py_ssize_t prow, Py_ssize_t pcol) noexcept nogil:
    """Bias+relu+2x2 pool of one packed 4x4xKTILE tile slice.

    pooled_out/idx_out point at element [., 0, 0, slice] of the tile's 2x2
    output patch; prow/pcol are those arrays' row/column strides (elements).
    Branch-free tournament max (first maximum wins) so the loop vectorizes.
    """
    cdef Py_ssize_t u, v, pos
    cdef int k
    cdef real v00, v01, v10, v11, b0, b1
    cdef unsigned char a01, a23
    for u in range(2):
        for v in range(2):
            for k in range(kc):
                v00 = yt[((2 * u) * 4 + 2 * v) * KTILE + k] + bias[k]
                v01 = yt[((2 * u) * 4 + 2 * v + 1) * KTILE + k] + bias[k]
                v10 = yt[((2 * u + 1) * 4 + 2 * v) * KTILE + k] + bias[k]
                v11 = yt[((2 * u + 1) * 4 + 2 * v + 1) * KTILE + k] + bias[k]
                v00 = v00 if v00 > 0.0 else 0.0
                v01 = v01 if v01 > 0.0 else 0.0
                v10 = v10 if v10 > 0.0 else 0.0
                v11 = v11 if v11 > 0.0 else 0.0
                a01 = 1 if v01 > v00 else 0
                b0 = v01 if v01 > v00 else v00
                a23 = 3 if v11 > v10 else 2
                b1 = v11 if v11 > v10 else v10
                pos = u * prow + v * pcol + k
                pooled_out[pos] = b1 if b1 > b0 else b0
                idx_out[pos] = a23 if b1 > b0 else a01


cdef inline void _gather_pool_grad16(const real* dpool, const real* pooled,
                                     const unsigned char* idx, int kc,
                                     Py_ssize_t prow, Py_ssize_t pcol,
                                     real* dyt) noexcept nogil:
    """Scatter pooled grads (relu-gated, argmax-routed) into a packed dY tile slice."""
    cdef Py_ssize_t u, v, pos
    cdef int k
    cdef unsigned char arg
    for k in range(16 * KTILE):
        dyt[k] = 0.0
    for u in range(2):
        for v in range(2):
            for k in range(kc):
                pos = u * prow + v * pcol + k
                if pooled[pos] > 0.0:
                    arg = idx[pos]
                    dyt[((2 * u + (arg >> 1)) * 4 + 2 * v + (arg & 1)) * KTILE + k] = dpool[pos]


# ---------------------------------------------------------------------------
# Whole-array Winograd kernels (V/M laid out (36, T, channels)).


def wino_input(real[:, :, :, ::1] x, Py_ssize_t th, Py_ssize_t tw):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[3], wp = x.shape[2]
    cdef Py_ssize_t t_total = n * th * tw
    out = np.empty((36, t_total, c), dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, ::1] v = out
    cdef Py_ssize_t i, p, q, t, s
    cdef int kc
    for i in range(n):
        for p in range(th):
            for q in range(tw):
                t = (i * th + p) * tw + q
                for s in range(0, c, KTILE):
                    kc = <int> min(<Py_ssize_t> KTILE, c - s)
                    _input_tile16(&x[i, 4 * p, 4 * q, s], wp * c, c,
                                  &v[0, t, s], t_total * c, kc)
    return out


def wino_output_bias_act(real[:, :, ::1] m, bias, Py_ssize_t n, Py_ssize_t th, Py_ssize_t tw,
                         bint relu):
    cdef Py_ssize_t f = m.shape[2], t_total = m.shape[1]
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n, 4 * th, 4 * tw, f), dtype=dtype)
    cdef real[:, :, :, ::1] y = out
    cdef real[::1] bias_v
    cdef bint has_bias = bias is not None
    if has_bias:
        bias_v = np.ascontiguousarray(bias, dtype=dtype)
    cdef real yt[16 * KTILE]
    cdef Py_ssize_t i, p, q, t, a, b, s
    cdef int kc, k
    cdef real val
    cdef real* dst
    for i in range(n):
        for p in range(th):
            for q in range(tw):
                t = (i * th + p) * tw + q
                for s in range(0, f, KTILE):
                    kc = <int> min(<Py_ssize_t> KTILE, f - s)
                    _output_tile16(&m[0, t, s], t_total * f, kc, yt)
                    for a in range(4):
                        for b in range(4):
                            dst = &y[i, 4 * p + a, 4 * q + b, s]
                            for k in range(kc):
                                val = yt[(a * 4 + b) * KTILE + k]
                                if has_bias:
                                    val = val + bias_v[s + k]
                                if relu and val < 0.0:
                                    val = 0.0
                                dst[k] = val
    return out


def wino_output_bias_relu_pool(real[:, :, ::1] m, bias, Py_ssize_t n, Py_ssize_t th, Py_ssize_t tw):
    """Fused untransform + bias + relu + 2x2/2 max pool; idx is dy*2+dx, first max wins."""
    cdef Py_ssize_t f = m.shape[2], t_total = m.shape[1]
    dtype = np.float32 if real is float else np.float64
    pooled_arr = np.empty((n, 2 * th, 2 * tw, f), dtype=dtype)
    idx_arr = np.empty((n, 2 * th, 2 * tw, f), dtype=np.uint8)
    cdef real[:, :, :, ::1] pooled = pooled_arr
    cdef unsigned char[:, :, :, ::1] idx = idx_arr
    cdef real[::1] bias_v = np.ascontiguousarray(bias, dtype=dtype)
    cdef real yt[16 * KTILE]
    cdef Py_ssize_t i, p, q, t, prow, pcol, s
    cdef int kc
    prow = 2 * tw * f
    pcol = f
    for i in range(n):
        for p in range(th):
            for q in range(tw):
                t = (i * th + p) * tw + q
                for s in range(0, f, KTILE):
                    kc = <int> min(<Py_ssize_t> KTILE, f - s)
                    _output_tile16(&m[0, t, s], t_total * f, kc, yt)
                    _pool_tile16(yt, &bias_v[s], kc,
                                 &pooled[i, 2 * p, 2 * q, s], &idx[i, 2 * p, 2 * q, s],
                                 prow, pcol)
    return pooled_arr, idx_arr


def wino_doutput(real[:, :, :, ::1] dy, Py_ssize_t th, Py_ssize_t tw):
    cdef Py_ssize_t n = dy.shape[0], f = dy.shape[3]
    cdef Py_ssize_t t_total = n * th * tw
    out = np.empty((36, t_total, f), dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, ::1] dm = out
    cdef real dyt[16 * KTILE]
    cdef Py_ssize_t i, p, q, t, a, b, s
    cdef int kc, k
    cdef const real* src
    for i in range(n):
        for p in range(th):
            for q in range(tw):
                t = (i * th + p) * tw + q
                for s in range(0, f, KTILE):
                    kc = <int> min(<Py_ssize_t> KTILE, f - s)
                    for a in range(4):
                        for b in range(4):
                            src = &dy[i, 4 * p + a, 4 * q + b, s]
                            for k in range(kc):
                                dyt[(a * 4 + b) * KTILE + k] = src[k]
                            for k in range(kc, KTILE):
                                dyt[(a * 4 + b) * KTILE + k] = 0.0
                    _doutput_tile16(dyt, &dm[0, t, s], t_total * f, kc)
    return out


def wino_pool_grad(real[:, :, :, ::1] dpool, real[:, :, :, ::1] pooled,
                   unsigned char[:, :, :, ::1] idx, Py_ssize_t th, Py_ssize_t tw):
    """Fused backward of wino_output_bias_relu_pool: pool scatter + relu gate + dM."""
    cdef Py_ssize_t n = dpool.shape[0], f = dpool.shape[3]
    cdef Py_ssize_t t_total = n * th * tw
    out = np.empty((36, t_total, f), dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, ::1] dm = out
    cdef real dyt[16 * KTILE]
    cdef Py_ssize_t i, p, q, t, prow, pcol, s
    cdef int kc
    prow = 2 * tw * f
    pcol = f
    for i in range(n):
        for p in range(th):
            for q in range(tw):
                t = (i * th + p) * tw + q
                for s in range(0, f, KTILE):
                    kc = <int> min(<Py_ssize_t> KTILE, f - s)
                    _gather_pool_grad16(&dpool[i, 2 * p, 2 * q, s], &pooled[i, 2 * p, 2 * q, s],
                                        &idx[i, 2 * p, 2 * q, s], kc, prow, pcol, dyt)
                    _doutput_tile16(dyt, &dm[0, t, s], t_total * f, kc)
    return out


def wino_dinput(real[:, :, ::1] dv, Py_ssize_t n, Py_ssize_t hp, Py_ssize_t wp,
                Py_ssize_t th, Py_ssize_t tw):
    cdef Py_ssize_t c = dv.shape[2], t_total = dv.shape[1]
    out = np.zeros((n, hp, wp, c), dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, ::1] dx = out
    cdef Py_ssize_t i, p, q, t, s
    cdef int kc
    for i in range(n):
        for p in range(th):
            for q in range(tw):
                t = (i * th + p) * tw + q
                for s in range(0, c, KTILE):
                    kc = <int> min(<Py_ssize_t> KTILE, c - s)
                    _dinput_tile16(&dv[0, t, s], t_total * c, kc,
                                   &dx[i, 4 * p, 4 * q, s], wp * c, c)
    return out


# ---------------------------------------------------------------------------
# Tile-block Winograd kernels: process tiles [t0, t1) against small scratch
# buffers shaped (36, capacity, channels). A pipelined caller keeps V and M
# entirely in cache and off the heap's hot path.


def wino_input_block(real[:, :, :, ::1] x, Py_ssize_t th, Py_ssize_t tw,
                     Py_ssize_t t0, Py_ssize_t t1, real[:, :, ::1] v_out,
                     Py_ssize_t col0=0):
    # writes tiles t0..t1 into columns col0.. of v_out, so the same kernel
    # fills either a per-block scratch (col0=0) or a whole-pass V buffer
    cdef Py_ssize_t c = x.shape[3], wp = x.shape[2]
    cdef Py_ssize_t cap = v_out.shape[1], grid = th * tw
    cdef Py_ssize_t t, i, p, q, r, s
    cdef int kc
    for t in range(t0, t1):
        i = t // grid
        r = t % grid
        p = r // tw
        q = r % tw
        for s in range(0, c, KTILE):
            kc = <int> min(<Py_ssize_t> KTILE, c - s)
            _input_tile16(&x[i, 4 * p, 4 * q, s], wp * c, c,
                          &v_out[0, t - t0 + col0, s], cap * c, kc)
    return None


def wino_output_pool_block(real[:, :, ::1] m, real[::1] bias, Py_ssize_t th, Py_ssize_t tw,
                           Py_ssize_t t0, Py_ssize_t t1,
                           real[:, :, :, ::1] pooled, unsigned char[:, :, :, ::1] idx):
    cdef Py_ssize_t f = m.shape[2], cap = m.shape[1], grid = th * tw
    cdef real yt[16 * KTILE]
    cdef Py_ssize_t t, i, p, q, r, prow, pcol, s
    cdef int kc
    prow = 2 * tw * f
    pcol = f
    for t in range(t0, t1):
        i = t // grid
        r = t % grid
        p = r // tw
        q = r % tw
        for s in range(0, f, KTILE):
            kc = <int> min(<Py_ssize_t> KTILE, f - s)
            _output_tile16(&m[0, t - t0, s], cap * f, kc, yt)
            _pool_tile16(yt, &bias[s], kc,
                         &pooled[i, 2 * p, 2 * q, s], &idx[i, 2 * p, 2 * q, s], prow, pcol)
    return None


def wino_pool_grad_block(real[:, :, :, ::1] dpool, real[:, :, :, ::1] pooled,
                         unsigned char[:, :, :, ::1] idx, Py_ssize_t th, Py_ssize_t tw,
                         Py_ssize_t t0, Py_ssize_t t1, real[:, :, ::1] dm_out):
    cdef Py_ssize_t f = dpool.shape[3], cap = dm_out.shape[1], grid = th * tw
    cdef real dyt[16 * KTILE]
    cdef Py_ssize_t t, i, p, q, r, prow, pcol, s
    cdef int kc
    prow = 2 * tw * f
    pcol = f
    for t in range(t0, t1):
        i = t // grid
        r = t % grid
        p = r // tw
        q = r % tw
        for s in range(0, f, KTILE):
            kc = <int> min(<Py_ssize_t> KTILE, f - s)
            _gather_pool_grad16(&dpool[i, 2 * p, 2 * q, s], &pooled[i, 2 * p, 2 * q, s],
                                &idx[i, 2 * p, 2 * q, s], kc, prow, pcol, dyt)
            _doutput_tile16(dyt, &dm_out[0, t - t0, s], cap * f, kc)
    return None


def wino_y2_block(real[:, :, ::1] m, real[:, :, ::1] y2, Py_ssize_t ncol):
    """Row-vectorized output transform of the first ncol columns of m.

    Both arguments are treated as 2-D row-major (36 x cols and 16 x cols);
    column j is one (tile, channel) pair. Equivalent to one 16x36 constant
    GEMM, but the constant has only structured +-1/2/4/8 entries, so the
    unrolled two-stage form beats a skinny BLAS call.
    """
    cdef Py_ssize_t ms = m.shape[1] * m.shape[2]
    cdef Py_ssize_t ys = y2.shape[1] * y2.shape[2]
    cdef const real* mp = &m[0, 0, 0]
    cdef real* yp = &y2[0, 0, 0]
    cdef Py_ssize_t j
    cdef int kc
    for j in range(0, ncol, KTILE):
        kc = <int> min(<Py_ssize_t> KTILE, ncol - j)
        _y2_cols16(mp + j, ms, yp + j, ys, kc)
    return None


def wino_dm_block(real[:, :, ::1] dy2, real[:, :, ::1] dm, Py_ssize_t col0,
                  Py_ssize_t ncol):
    """Adjoint of wino_y2_block: dm columns [col0*f ..) from dy2[:, :ncol].

    col0 is a tile offset into dm, so dm can be a whole-pass buffer written
    block by block.
    """
    cdef Py_ssize_t ds = dy2.shape[1] * dy2.shape[2]
    cdef Py_ssize_t ms = dm.shape[1] * dm.shape[2]
    cdef const real* dp = &dy2[0, 0, 0]
    cdef real* mp = &dm[0, 0, 0] + col0 * dm.shape[2]
    cdef Py_ssize_t j
    cdef int kc
    for j in range(0, ncol, KTILE):
        kc = <int> min(<Py_ssize_t> KTILE, ncol - j)
        _dm_cols16(dp + j, ds, mp + j, ms, kc)
    return None


def wino_dinput_block(real[:, :, ::1] dv, Py_ssize_t th, Py_ssize_t tw,
                      Py_ssize_t t0, Py_ssize_t t1, real[:, :, :, ::1] dxp,
                      Py_ssize_t col0=0):
    """Overlap-add the tiles [t0, t1) of dV into the padded input gradient.

    Tile t is read from column t - t0 + col0 of dv, so dv can be either a
    per-block scratch (col0=0) or a whole-pass buffer (col0=t0).
    """
    cdef Py_ssize_t c = dv.shape[2], cap = dv.shape[1], grid = th * tw
    cdef Py_ssize_t wp = dxp.shape[2]
    cdef Py_ssize_t t, i, p, q, r, s
    cdef int kc
    for t in range(t0, t1):
        i = t // grid
        r = t % grid
        p = r // tw
        q = r % tw
        for s in range(0, c, KTILE):
            kc = <int> min(<Py_ssize_t> KTILE, c - s)
            _dinput_tile16(&dv[0, t - t0 + col0, s], cap * c, kc,
                           &dxp[i, 4 * p, 4 * q, s], wp * c, c)
    return None


def wino_pool_from_y2_block(real[:, :, ::1] y2, real[::1] bias, Py_ssize_t th, Py_ssize_t tw,
                            Py_ssize_t t0, Py_ssize_t t1,
                            real[:, :, :, ::1] pooled, unsigned char[:, :, :, ::1] idx):
    """Bias+relu+2x2 pool straight from untransformed tiles in row-vec layout.

    y2 is (16, capacity, F): row r = 4*a + b holds output pixel (a, b) of each
    tile, as produced by one GEMM with the row-vectorized output transform.
    Channel slices go through stack buffers, the tournament is fmax/compare
    arithmetic, and full slices use fixed-width loops: all of it vectorizes
    without runtime alias or length checks.
    """
    cdef Py_ssize_t f = pooled.shape[3], cap = y2.shape[1], grid = th * tw
    cdef Py_ssize_t t, i, p, q, r, u, v, base, ks, s, kc, k, r00
    cdef const real* ysrc
    cdef const real* bp
    cdef real* prow_p
    cdef unsigned char* irow_p
    cdef real ybuf[4 * KTILE]
    cdef real pbuf[KTILE]
    cdef int ibuf[KTILE]
    cdef real v00, v01, v10, v11, b0, b1
    cdef int a01, a23, sel
    ks = cap * f
    ysrc = &y2[0, 0, 0]
    bp = &bias[0]
    for t in range(t0, t1):
        i = t // grid
        r = t % grid
        p = r // tw
        q = r % tw
        base = (t - t0) * f
        for u in range(2):
            for v in range(2):
                r00 = ((2 * u) * 4 + 2 * v) * ks + base
                prow_p = &pooled[i, 2 * p + u, 2 * q + v, 0]
                irow_p = &idx[i, 2 * p + u, 2 * q + v, 0]
                for s in range(0, f, KTILE):
                    kc = f - s
                    if kc >= KTILE:
                        for k in range(KTILE):
                            ybuf[k] = ysrc[r00 + s + k] + bp[s + k]
                        for k in range(KTILE):
                            ybuf[KTILE + k] = ysrc[r00 + ks + s + k] + bp[s + k]
                        for k in range(KTILE):
                            ybuf[2 * KTILE + k] = ysrc[r00 + 4 * ks + s + k] + bp[s + k]
                        for k in range(KTILE):
                            ybuf[3 * KTILE + k] = ysrc[r00 + 5 * ks + s + k] + bp[s + k]
                    else:
                        for k in range(kc):
                            ybuf[k] = ysrc[r00 + s + k] + bp[s + k]
                        for k in range(kc):
                            ybuf[KTILE + k] = ysrc[r00 + ks + s + k] + bp[s + k]
                        for k in range(kc):
                            ybuf[2 * KTILE + k] = ysrc[r00 + 4 * ks + s + k] + bp[s + k]
                        for k in range(kc):
                            ybuf[3 * KTILE + k] = ysrc[r00 + 5 * ks + s + k] + bp[s + k]
                        for k in range(kc, KTILE):
                            ybuf[k] = 0.0
                            ybuf[KTILE + k] = 0.0
                            ybuf[2 * KTILE + k] = 0.0
                            ybuf[3 * KTILE + k] = 0.0
                    for k in range(KTILE):
                        if real is float:
                            v00 = fmaxf(ybuf[k], 0.0)
                            v01 = fmaxf(ybuf[KTILE + k], 0.0)
                            v10 = fmaxf(ybuf[2 * KTILE + k], 0.0)
                            v11 = fmaxf(ybuf[3 * KTILE + k], 0.0)
                            b0 = fmaxf(v00, v01)
                            b1 = fmaxf(v10, v11)
                            pbuf[k] = fmaxf(b0, b1)
                        else:
                            v00 = fmax(ybuf[k], 0.0)
                            v01 = fmax(ybuf[KTILE + k], 0.0)
                            v10 = fmax(ybuf[2 * KTILE + k], 0.0)
                            v11 = fmax(ybuf[3 * KTILE + k], 0.0)
                            b0 = fmax(v00, v01)
                            b1 = fmax(v10, v11)
                            pbuf[k] = fmax(b0, b1)
                        a01 = <int> (v01 > v00)
                        a23 = 2 + <int> (v11 > v10)
                        sel = <int> (b1 > b0)
                        ibuf[k] = a01 + (a23 - a01) * sel
                    if kc >= KTILE:
                        for k in range(KTILE):
                            prow_p[s + k] = pbuf[k]
                        for k in range(KTILE):
                            irow_p[s + k] = <unsigned char> ibuf[k]
                    else:
                        for k in range(kc):
                            prow_p[s + k] = pbuf[k]
                        for k in range(kc):
                            irow_p[s + k] = <unsigned char> ibuf[k]
    return None


def wino_pool_scatter_block(real[:, :, :, ::1] d, unsigned char[:, :, :, ::1] idx,
                            Py_ssize_t th, Py_ssize_t tw, Py_ssize_t t0, Py_ssize_t t1,
                            real[:, :, ::1] dy2):
    """Scatter (already relu-gated) pool grads into row-vec dY tiles (16, capacity, F).

    Inverse of wino_pool_from_y2_block up to the gate: each pooled gradient lands
    on its argmax pixel row; everything else in the [t0, t1) range is zeroed.
    """
    cdef Py_ssize_t f = d.shape[3], cap = dy2.shape[1], grid = th * tw
    cdef Py_ssize_t t, i, p, q, r, u, v, base, ks, j
    cdef Py_ssize_t k
    cdef real* dst
    cdef const real* drow
    cdef unsigned char arg
    ks = cap * f
    dst = &dy2[0, 0, 0]
    for j in range(16):
        for k in range((t1 - t0) * f):
            dst[j * ks + k] = 0.0
    for t in range(t0, t1):
        i = t // grid
        r = t % grid
        p = r // tw
        q = r % tw
        base = (t - t0) * f
        for u in range(2):
            for v in range(2):
                drow = &d[i, 2 * p + u, 2 * q + v, 0]
                for k in range(f):
                    arg = idx[i, 2 * p + u, 2 * q + v, k]
                    dst[((2 * u + (arg >> 1)) * 4 + 2 * v + (arg & 1)) * ks + base + k] = drow[k]
    return None


# ---------------------------------------------------------------------------
# Direct 3x3 valid convolution for small channel counts (e.g. the stem layer),
# where im2col/Winograd overhead exceeds the arithmetic. Weights (3,3,C,F).


def conv3x3_small_fwd(real[:, :, :, ::1] x, real[:, :, :, ::1] w, real[::1] bias, bint relu,
                      out=None):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], wd = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t f = w.shape[3]
    cdef Py_ssize_t oh = h - 2, ow = wd - 2
    if out is None:
        out = np.empty((n, oh, ow, f), dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, ::1] y = out
    cdef Py_ssize_t i, oy, ox, a, b, cc, k, s, kc
    cdef real xv, acv
    cdef real xv0, xv1, xv2, xv3, xv4, xv5, xv6, xv7, xv8
    cdef real acc[KTILE]
    cdef real wbuf[9 * KTILE]
    cdef real bb[KTILE]
    cdef const real* wrow
    cdef const real* xrow
    cdef const real* r0
    cdef const real* r1
    cdef const real* r2
    cdef const real* bp = &bias[0]
    cdef real* dst
    cdef real* drow
    if c == 1 and f % KTILE == 0:
        # stem case: single input channel, full slices; the nine taps live in
        # stack vectors so the whole conv is one fused loop per output pixel
        for s in range(0, f, KTILE):
            for a in range(3):
                for b in range(3):
                    wrow = &w[a, b, 0, s]
                    for k in range(KTILE):
                        wbuf[(a * 3 + b) * KTILE + k] = wrow[k]
            for k in range(KTILE):
                bb[k] = bp[s + k]
            for i in range(n):
                for oy in range(oh):
                    r0 = &x[i, oy, 0, 0]
                    r1 = &x[i, oy + 1, 0, 0]
                    r2 = &x[i, oy + 2, 0, 0]
                    drow = &y[i, oy, 0, 0]
                    for ox in range(ow):
                        xv0 = r0[ox]
                        xv1 = r0[ox + 1]
                        xv2 = r0[ox + 2]
                        xv3 = r1[ox]
                        xv4 = r1[ox + 1]
                        xv5 = r1[ox + 2]
                        xv6 = r2[ox]
                        xv7 = r2[ox + 1]
                        xv8 = r2[ox + 2]
                        for k in range(KTILE):
                            acv = (bb[k]
                                   + xv0 * wbuf[k] + xv1 * wbuf[KTILE + k]
                                   + xv2 * wbuf[2 * KTILE + k] + xv3 * wbuf[3 * KTILE + k]
                                   + xv4 * wbuf[4 * KTILE + k] + xv5 * wbuf[5 * KTILE + k]
                                   + xv6 * wbuf[6 * KTILE + k] + xv7 * wbuf[7 * KTILE + k]
                                   + xv8 * wbuf[8 * KTILE + k])
                            if relu:
                                if real is float:
                                    acv = fmaxf(acv, 0.0)
                                else:
                                    acv = fmax(acv, 0.0)
                            drow[ox * f + s + k] = acv
        return out
    for i in range(n):
        for oy in range(oh):
            for ox in range(ow):
                dst = &y[i, oy, ox, 0]
                for s in range(0, f, KTILE):
                    kc = f - s
                    if kc >= KTILE:
                        for k in range(KTILE):
                            acc[k] = bp[s + k]
                        for a in range(3):
                            xrow = &x[i, oy + a, ox, 0]
                            for b in range(3):
                                for cc in range(c):
                                    xv = xrow[b * c + cc]
                                    wrow = &w[a, b, cc, s]
                                    for k in range(KTILE):
                                        acc[k] += xv * wrow[k]
                        if relu:
                            for k in range(KTILE):
                                if real is float:
                                    dst[s + k] = fmaxf(acc[k], 0.0)
                                else:
                                    dst[s + k] = fmax(acc[k], 0.0)
                        else:
                            for k in range(KTILE):
                                dst[s + k] = acc[k]
                    else:
                        for k in range(kc):
                            acc[k] = bp[s + k]
                        for a in range(3):
                            xrow = &x[i, oy + a, ox, 0]
                            for b in range(3):
                                for cc in range(c):
                                    xv = xrow[b * c + cc]
                                    wrow = &w[a, b, cc, s]
                                    for k in range(kc):
                                        acc[k] += xv * wrow[k]
                        if relu:
                            for k in range(kc):
                                if real is float:
                                    dst[s + k] = fmaxf(acc[k], 0.0)
                                else:
                                    dst[s + k] = fmax(acc[k], 0.0)
                        else:
                            for k in range(kc):
                                dst[s + k] = acc[k]
    return out


def conv3x3_small_back_w(real[:, :, :, ::1] x, real[:, :, :, ::1] dy,
                         real[:, :, :, ::1] gw, real[::1] gb):
    """Accumulate weight/bias grads of the small direct conv (double accumulators)."""
    cdef Py_ssize_t n = x.shape[0], c = x.shape[3], f = dy.shape[3]
    cdef Py_ssize_t oh = dy.shape[1], ow = dy.shape[2]
    cdef double* wacc = <double*> malloc((9 * c * f + f) * sizeof(double))
    if wacc == NULL:
        raise MemoryError()
    cdef double* bacc = wacc + 9 * c * f
    cdef Py_ssize_t i, oy, ox, a, b, cc, k, s, kc
    cdef double xv
    cdef double dbuf[KTILE]
    cdef const real* drow
    cdef const real* xrow
    cdef double* arow
    try:
        for k in range(9 * c * f + f):
            wacc[k] = 0.0
        for i in range(n):
            for oy in range(oh):
                for ox in range(ow):
                    drow = &dy[i, oy, ox, 0]
                    for s in range(0, f, KTILE):
                        kc = f - s
                        if kc >= KTILE:
                            for k in range(KTILE):
                                dbuf[k] = <double> drow[s + k]
                            for k in range(KTILE):
                                bacc[s + k] += dbuf[k]
                            for a in range(3):
                                xrow = &x[i, oy + a, ox, 0]
                                for b in range(3):
                                    for cc in range(c):
                                        xv = <double> xrow[b * c + cc]
                                        arow = wacc + ((a * 3 + b) * c + cc) * f + s
                                        for k in range(KTILE):
                                            arow[k] += xv * dbuf[k]
                        else:
                            for k in range(kc):
                                dbuf[k] = <double> drow[s + k]
                            for k in range(kc):
                                bacc[s + k] += dbuf[k]
                            for a in range(3):
                                xrow = &x[i, oy + a, ox, 0]
                                for b in range(3):
                                    for cc in range(c):
                                        xv = <double> xrow[b * c + cc]
                                        arow = wacc + ((a * 3 + b) * c + cc) * f + s
                                        for k in range(kc):
                                            arow[k] += xv * dbuf[k]
        for a in range(3):
            for b in range(3):
                for cc in range(c):
                    arow = wacc + ((a * 3 + b) * c + cc) * f
                    for k in range(f):
                        gw[a, b, cc, k] += <real> arow[k]
        for k in range(f):
            gb[k] += <real> bacc[k]
    finally:
        free(wacc)
    return None


# ---------------------------------------------------------------------------
# Pooling


def maxpool2x2(real[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t oh = h // 2, ow = w // 2
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n, oh, ow, c), dtype=dtype)
    idx_arr = np.empty((n, oh, ow, c), dtype=np.uint8)
    cdef real[:, :, :, ::1] out = out_arr
    cdef unsigned char[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t i, p, q, k
    cdef real v00, v01, v10, v11, best
    cdef unsigned char arg
    for i in range(n):
        for p in range(oh):
            for q in range(ow):
                for k in range(c):
                    v00 = x[i, 2 * p, 2 * q, k]
                    v01 = x[i, 2 * p, 2 * q + 1, k]
                    v10 = x[i, 2 * p + 1, 2 * q, k]
                    v11 = x[i, 2 * p + 1, 2 * q + 1, k]
                    best = v00; arg = 0
                    if v01 > best: best = v01; arg = 1
                    if v10 > best: best = v10; arg = 2
                    if v11 > best: best = v11; arg = 3
                    out[i, p, q, k] = best
                    idx[i, p, q, k] = arg
    return out_arr, idx_arr


def maxpool2x2_backward(real[:, :, :, ::1] dout, unsigned char[:, :, :, ::1] idx):
    cdef Py_ssize_t n = dout.shape[0], oh = dout.shape[1], ow = dout.shape[2], c = dout.shape[3]
    dx_arr = np.zeros((n, 2 * oh, 2 * ow, c), dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t i, p, q, k
    cdef unsigned char arg
    for i in range(n):
        for p in range(oh):
            for q in range(ow):
                for k in range(c):
                    arg = idx[i, p, q, k]
                    dx[i, 2 * p + (arg >> 1), 2 * q + (arg & 1), k] = dout[i, p, q, k]
    return dx_arr


def maxpool(real[:, :, :, ::1] x, Py_ssize_t k, Py_ssize_t s):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t oh = (h - k) // s + 1, ow = (w - k) // s + 1
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n, oh, ow, c), dtype=dtype)
    idx_arr = np.empty((n, oh, ow, c), dtype=np.uint8)
    cdef real[:, :, :, ::1] out = out_arr
    cdef unsigned char[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t i, p, q, ch, dy, dx_
    cdef real best, val
    cdef unsigned char arg
    for i in range(n):
        for p in range(oh):
            for q in range(ow):
                for ch in range(c):
                    best = x[i, p * s, q * s, ch]
                    arg = 0
                    for dy in range(k):
                        for dx_ in range(k):
                            val = x[i, p * s + dy, q * s + dx_, ch]
                            if val > best:
                                best = val
                                arg = <unsigned char> (dy * k + dx_)
                    out[i, p, q, ch] = best
                    idx[i, p, q, ch] = arg
    return out_arr, idx_arr


def maxpool_backward(real[:, :, :, ::1] dout, unsigned char[:, :, :, ::1] idx,
                     Py_ssize_t h, Py_ssize_t w, Py_ssize_t k, Py_ssize_t s):
    cdef Py_ssize_t n = dout.shape[0], oh = dout.shape[1], ow = dout.shape[2], c = dout.shape[3]
    dx_arr = np.zeros((n, h, w, c), dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t i, p, q, ch
    cdef unsigned char arg
    for i in range(n):
        for p in range(oh):
            for q in range(ow):
                for ch in range(c):
                    arg = idx[i, p, q, ch]
                    dx[i, p * s + arg // k, q * s + arg % k, ch] += dout[i, p, q, ch]
    return dx_arr


# ---------------------------------------------------------------------------
# Elementwise


def add_bias_relu(real[:, ::1] y, real[::1] bias):
    cdef Py_ssize_t rows = y.shape[0], c = y.shape[1]
    cdef Py_ssize_t i, k
    cdef real val
    for i in range(rows):
        for k in range(c):
            val = y[i, k] + bias[k]
            y[i, k] = val if val > 0.0 else 0.0


def add_bias(real[:, ::1] y, real[::1] bias):
    cdef Py_ssize_t rows = y.shape[0], c = y.shape[1]
    cdef Py_ssize_t i, k
    for i in range(rows):
        for k in range(c):
            y[i, k] += bias[k]


def relu_gate(real[::1] d, real[::1] act):
    cdef Py_ssize_t n = d.shape[0]
    cdef Py_ssize_t i
    for i in range(n):
        if act[i] <= 0.0:
            d[i] = 0.0


def adam_step(real[::1] w, real[::1] grad, real[::1] m, real[::1] v, long t,
              double lr, double beta1, double beta2, double eps):
    cdef Py_ssize_t n = w.shape[0]
    # all arithmetic in the array precision so the loop vectorizes
    cdef real b1 = <real> beta1, b2 = <real> beta2
    cdef real omb1 = <real> (1.0 - beta1), omb2 = <real> (1.0 - beta2)
    cdef real lr_r = <real> lr, eps_r = <real> eps
    cdef real ibc1 = <real> (1.0 / (1.0 - beta1 ** t))
    cdef real ibc2 = <real> (1.0 / (1.0 - beta2 ** t))
    cdef Py_ssize_t i
    cdef real g, mi, vi, s
    for i in range(n):
        g = grad[i]
        mi = b1 * m[i] + omb1 * g
        vi = b2 * v[i] + omb2 * g * g
        m[i] = mi
        v[i] = vi
        if real is float:
            s = sqrtf(vi * ibc2)
        else:
            s = sqrt(vi * ibc2)
        w[i] = w[i] - lr_r * (mi * ibc1) / (s + eps_r)


# ---------------------------------------------------------------------------
# Bilinear rotate (augmentation)


def rotate_bilinear(real[:, ::1] img, double degrees):
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1]
    out_arr = np.empty((h, w), dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] out = out_arr
    cdef double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0
    cdef double theta = degrees * PI / 180.0
    cdef double cos_t = cos(theta), sin_t = sin(theta)
    cdef Py_ssize_t i, j, x0, y0
    cdef double xr, yr, sx, sy, fx, fy, v00, v01, v10, v11
    for i in range(h):
        yr = i - cy
        for j in range(w):
            xr = j - cx
            sx = cx + cos_t * xr + sin_t * yr
            sy = cy - sin_t * xr + cos_t * yr
            x0 = <Py_ssize_t> floor(sx)
            y0 = <Py_ssize_t> floor(sy)
            fx = sx - x0
            fy = sy - y0
            v00 = img[y0, x0] if 0 <= y0 < h and 0 <= x0 < w else 0.0
            v01 = img[y0, x0 + 1] if 0 <= y0 < h and 0 <= x0 + 1 < w else 0.0
            v10 = img[y0 + 1, x0] if 0 <= y0 + 1 < h and 0 <= x0 < w else 0.0
            v11 = img[y0 + 1, x0 + 1] if 0 <= y0 + 1 < h and 0 <= x0 + 1 < w else 0.0
            out[i, j] = <real> ((1 - fy) * ((1 - fx) * v00 + fx * v01)
                                + fy * ((1 - fx) * v10 + fx * v11))
    return out_arr
