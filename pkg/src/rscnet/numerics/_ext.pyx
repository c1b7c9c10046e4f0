# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: dilated convolution (NCHW, zero "same" padding, no
bias) and the per-channel batch-norm / PReLU passes.

Convolution kernels walk the kernel taps in the outer loops and stream a
contiguous row in the innermost loop, so the compiler can vectorize it.
Channel kernels take arrays viewed as ``(B, C, L)``.
"""

from libc.stdlib cimport calloc, free, malloc


ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _max(Py_ssize_t a, Py_ssize_t b) nogil:
    return a if a > b else b


cdef inline Py_ssize_t _min(Py_ssize_t a, Py_ssize_t b) nogil:
    return a if a < b else b


def conv2d_forward(real[:, :, :, ::1] x, real[:, :, :, ::1] w,
                   real[:, :, :, ::1] out,
                   Py_ssize_t dil_h, Py_ssize_t dil_w,
                   Py_ssize_t pad_h, Py_ssize_t pad_w):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = w.shape[0], KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t b, o, c, m, n, i, j, di, dj, i0, i1, j0, j1
    cdef real wv
    cdef real* orow
    cdef const real* xrow
    with nogil:
        for b in range(B):
            for o in range(O):
                for c in range(C):
                    for m in range(KH):
                        di = m * dil_h - pad_h
                        i0 = _max(0, -di)
                        i1 = _min(H, H - di)
                        for n in range(KW):
                            dj = n * dil_w - pad_w
                            j0 = _max(0, -dj)
                            j1 = _min(W, W - dj)
                            wv = w[o, c, m, n]
                            if wv == 0:
                                continue
                            for i in range(i0, i1):
                                orow = &out[b, o, i, 0]
                                xrow = &x[b, c, i + di, 0]
                                for j in range(j0, j1):
                                    orow[j] += wv * xrow[j + dj]


def conv2d_backward_input(real[:, :, :, ::1] gout, real[:, :, :, ::1] w,
                          real[:, :, :, ::1] gx,
                          Py_ssize_t dil_h, Py_ssize_t dil_w,
                          Py_ssize_t pad_h, Py_ssize_t pad_w):
    cdef Py_ssize_t B = gout.shape[0], O = gout.shape[1]
    cdef Py_ssize_t H = gout.shape[2], W = gout.shape[3]
    cdef Py_ssize_t C = w.shape[1], KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t b, o, c, m, n, i, j, di, dj, i0, i1, j0, j1
    cdef real wv
    cdef const real* grow
    cdef real* xrow
    with nogil:
        for b in range(B):
            for c in range(C):
                for o in range(O):
                    for m in range(KH):
                        di = m * dil_h - pad_h
                        i0 = _max(0, -di)
                        i1 = _min(H, H - di)
                        for n in range(KW):
                            dj = n * dil_w - pad_w
                            j0 = _max(0, -dj)
                            j1 = _min(W, W - dj)
                            wv = w[o, c, m, n]
                            if wv == 0:
                                continue
                            for i in range(i0, i1):
                                grow = &gout[b, o, i, 0]
                                xrow = &gx[b, c, i + di, 0]
                                for j in range(j0, j1):
                                    xrow[j + dj] += wv * grow[j]


def conv2d_backward_weight(real[:, :, :, ::1] gout, real[:, :, :, ::1] x,
                           double[:, :, :, ::1] gw,
                           Py_ssize_t dil_h, Py_ssize_t dil_w,
                           Py_ssize_t pad_h, Py_ssize_t pad_w):
    # Sample-outermost so one sample's rows stay cache-resident. Each tap keeps a
    # per-column partial row in the input precision for one sample; rows are
    # folded into double totals after every sample.
    cdef Py_ssize_t B = gout.shape[0], O = gout.shape[1]
    cdef Py_ssize_t H = gout.shape[2], W = gout.shape[3]
    cdef Py_ssize_t C = x.shape[1], KH = gw.shape[2], KW = gw.shape[3]
    cdef Py_ssize_t b, o, c, m, n, i, j, di, dj, i0, i1, j0, j1, row, t
    cdef Py_ssize_t n_rows = O * C * KH * KW
    cdef double acc
    cdef const real* grow
    cdef const real* xrow
    cdef real* p
    cdef real* part = <real*>malloc(n_rows * W * sizeof(real))
    cdef double* total = <double*>calloc(n_rows * W, sizeof(double))
    if part == NULL or total == NULL:
        free(part)
        free(total)
        raise MemoryError()
    try:
        with nogil:
            for b in range(B):
                for t in range(n_rows * W):
                    part[t] = 0
                for o in range(O):
                    for c in range(C):
                        for m in range(KH):
                            di = m * dil_h - pad_h
                            i0 = _max(0, -di)
                            i1 = _min(H, H - di)
                            for n in range(KW):
                                dj = n * dil_w - pad_w
                                j0 = _max(0, -dj)
                                j1 = _min(W, W - dj)
                                row = ((o * C + c) * KH + m) * KW + n
                                p = &part[row * W]
                                for i in range(i0, i1):
                                    grow = &gout[b, o, i, 0]
                                    xrow = &x[b, c, i + di, 0]
                                    for j in range(j0, j1):
                                        p[j] += grow[j] * xrow[j + dj]
                for t in range(n_rows * W):
                    total[t] += part[t]
            for o in range(O):
                for c in range(C):
                    for m in range(KH):
                        for n in range(KW):
                            row = ((o * C + c) * KH + m) * KW + n
                            acc = 0.0
                            for j in range(W):
                                acc += total[row * W + j]
                            gw[o, c, m, n] += acc
    finally:
        free(part)
        free(total)


def channel_moments(real[:, :, ::1] x, double[::1] mean, double[::1] var):
    """Per-channel mean and biased variance (two-pass, double accumulation)."""
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], L = x.shape[2]
    cdef Py_ssize_t b, c, k
    cdef double s, d, n = <double>(B * L)
    with nogil:
        for c in range(C):
            s = 0.0
            for b in range(B):
                for k in range(L):
                    s += x[b, c, k]
            mean[c] = s / n
            s = 0.0
            for b in range(B):
                for k in range(L):
                    d = x[b, c, k] - mean[c]
                    s += d * d
            var[c] = s / n


def channel_affine(real[:, :, ::1] x, real[::1] scale, real[::1] shift,
                   real[:, :, ::1] out):
    """``out = x * scale[c] + shift[c]``."""
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], L = x.shape[2]
    cdef Py_ssize_t b, c, k
    cdef real a, t
    with nogil:
        for b in range(B):
            for c in range(C):
                a = scale[c]
                t = shift[c]
                for k in range(L):
                    out[b, c, k] = x[b, c, k] * a + t


def bn_backward_sums(real[:, :, ::1] g, real[:, :, ::1] x, real[::1] mean,
                     real[::1] inv, double[::1] sum_g, double[::1] sum_gxhat):
    """Per-channel ``sum(g)`` and ``sum(g * xhat)`` with ``xhat = (x - mean) * inv``."""
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], L = x.shape[2]
    cdef Py_ssize_t b, c, k
    cdef double s1, s2
    cdef real mu, iv
    with nogil:
        for c in range(C):
            s1 = 0.0
            s2 = 0.0
            mu = mean[c]
            iv = inv[c]
            for b in range(B):
                for k in range(L):
                    s1 += g[b, c, k]
                    s2 += g[b, c, k] * (x[b, c, k] - mu) * iv
            sum_g[c] = s1
            sum_gxhat[c] = s2


def bn_backward_input(real[:, :, ::1] g, real[:, :, ::1] x, real[::1] mean,
                      real[::1] inv, real[::1] gamma, double[::1] sum_g,
                      double[::1] sum_gxhat, bint training, real[:, :, ::1] gx):
    """Input gradient of batch norm; batch-statistics terms only when training."""
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], L = x.shape[2]
    cdef Py_ssize_t b, c, k
    cdef real a, mu, iv, cg, cx
    cdef double m = <double>(B * L)
    with nogil:
        for c in range(C):
            mu = mean[c]
            iv = inv[c]
            a = gamma[c] * iv
            if training:
                cg = <real>(sum_g[c] / m)
                cx = <real>(sum_gxhat[c] / m)
            else:
                cg = 0
                cx = 0
            for b in range(B):
                for k in range(L):
                    gx[b, c, k] = a * (g[b, c, k] - cg - (x[b, c, k] - mu) * iv * cx)


def prelu_forward(real[:, :, ::1] x, real[::1] alpha, real[:, :, ::1] out):
    # branch-free select so the row loop vectorizes
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], L = x.shape[2]
    cdef Py_ssize_t b, c, k
    cdef real a, v, pos
    with nogil:
        for b in range(B):
            for c in range(C):
                a = alpha[c]
                for k in range(L):
                    v = x[b, c, k]
                    pos = v > 0
                    out[b, c, k] = v * (pos + a * (1 - pos))


def prelu_backward(real[:, :, ::1] g, real[:, :, ::1] x, real[::1] alpha,
                   real[:, :, ::1] gx, double[::1] galpha):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], L = x.shape[2]
    cdef Py_ssize_t b, c, k
    cdef real a, v, gv, pos
    cdef double s
    cdef real* acc = <real*>malloc(L * sizeof(real))
    if acc == NULL:
        raise MemoryError()
    try:
        with nogil:
            for c in range(C):
                a = alpha[c]
                for k in range(L):
                    acc[k] = 0
                for b in range(B):
                    for k in range(L):
                        v = x[b, c, k]
                        gv = g[b, c, k]
                        pos = v > 0
                        gx[b, c, k] = gv * (pos + a * (1 - pos))
                        acc[k] += gv * v * (1 - pos)
                s = 0.0
                for k in range(L):
                    s += acc[k]
                galpha[c] += s
    finally:
        free(acc)
