"""Pure numpy versions of the compiled kernels in ``_ext``.

Same signatures: kernels write or accumulate into caller-provided arrays.
Used when the extension is not built, or when ``RSCNET_BACKEND=python``.
"""
import numpy as np


def _tap_ranges(extent, n_taps, dil, pad):
    for t in range(n_taps):
        d = t * dil - pad
        lo = max(0, -d)
        hi = min(extent, extent - d)
        yield t, d, lo, hi


def conv2d_forward(x, w, out, dil_h, dil_w, pad_h, pad_w):
    H, W = x.shape[2], x.shape[3]
    for m, di, i0, i1 in _tap_ranges(H, w.shape[2], dil_h, pad_h):
        if i0 >= i1:
            continue
        for n, dj, j0, j1 in _tap_ranges(W, w.shape[3], dil_w, pad_w):
            if j0 >= j1:
                continue
            xs = x[:, :, i0 + di:i1 + di, j0 + dj:j1 + dj]
            # (O, C) x (B, C, h, w) -> (B, O, h, w)
            out[:, :, i0:i1, j0:j1] += np.einsum("oc,bchw->bohw", w[:, :, m, n], xs)


def conv2d_backward_input(gout, w, gx, dil_h, dil_w, pad_h, pad_w):
    H, W = gout.shape[2], gout.shape[3]
    for m, di, i0, i1 in _tap_ranges(H, w.shape[2], dil_h, pad_h):
        if i0 >= i1:
            continue
        for n, dj, j0, j1 in _tap_ranges(W, w.shape[3], dil_w, pad_w):
            if j0 >= j1:
                continue
            gs = gout[:, :, i0:i1, j0:j1]
            gx[:, :, i0 + di:i1 + di, j0 + dj:j1 + dj] += np.einsum(
                "oc,bohw->bchw", w[:, :, m, n], gs)


def conv2d_backward_weight(gout, x, gw, dil_h, dil_w, pad_h, pad_w):
    H, W = gout.shape[2], gout.shape[3]
    for m, di, i0, i1 in _tap_ranges(H, gw.shape[2], dil_h, pad_h):
        if i0 >= i1:
            continue
        for n, dj, j0, j1 in _tap_ranges(W, gw.shape[3], dil_w, pad_w):
            if j0 >= j1:
                continue
            gs = gout[:, :, i0:i1, j0:j1].astype(np.float64, copy=False)
            xs = x[:, :, i0 + di:i1 + di, j0 + dj:j1 + dj].astype(np.float64, copy=False)
            gw[:, :, m, n] += np.einsum("bohw,bchw->oc", gs, xs)


def channel_moments(x, mean, var):
    x64 = x.astype(np.float64, copy=False)
    mean[:] = x64.mean(axis=(0, 2))
    var[:] = ((x64 - mean[None, :, None]) ** 2).mean(axis=(0, 2))


def channel_affine(x, scale, shift, out):
    np.multiply(x, scale[None, :, None], out=out)
    out += shift[None, :, None]


def bn_backward_sums(g, x, mean, inv, sum_g, sum_gxhat):
    xhat = (x - mean[None, :, None]) * inv[None, :, None]
    sum_g[:] = g.sum(axis=(0, 2), dtype=np.float64)
    sum_gxhat[:] = (g * xhat).sum(axis=(0, 2), dtype=np.float64)


def bn_backward_input(g, x, mean, inv, gamma, sum_g, sum_gxhat, training, gx):
    a = (gamma * inv)[None, :, None]
    if training:
        m = x.shape[0] * x.shape[2]
        xhat = (x - mean[None, :, None]) * inv[None, :, None]
        cg = (sum_g / m).astype(x.dtype)[None, :, None]
        cx = (sum_gxhat / m).astype(x.dtype)[None, :, None]
        gx[...] = a * (g - cg - xhat * cx)
    else:
        gx[...] = a * g


def prelu_forward(x, alpha, out):
    out[...] = np.where(x > 0, x, alpha[None, :, None] * x)


def prelu_backward(g, x, alpha, gx, galpha):
    pos = x > 0
    gx[...] = np.where(pos, g, alpha[None, :, None] * g)
    galpha += np.where(pos, 0, g * x).sum(axis=(0, 2), dtype=np.float64)
