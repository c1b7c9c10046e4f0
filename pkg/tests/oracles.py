"""Brute-force reference implementations, written independently of the fast paths."""
import math

import numpy as np


def conv2d_loops(x, w, bias, dilation):
    """Direct same-padded dilated cross-correlation, one output element at a time.

    out[o, i, j] = bias[o] + sum_{c, m, n} x[c, i + d*m - pad_h, j + d*n - pad_w] * w[o, c, m, n]
    """
    C_in, H, W = x.shape
    C_out, _, kh, kw = w.shape
    pad_h = (kh + (kh - 1) * (dilation - 1) - 1) // 2
    pad_w = (kw + (kw - 1) * (dilation - 1) - 1) // 2
    out = np.zeros((C_out, H, W), dtype=np.float64)
    for o in range(C_out):
        for i in range(H):
            for j in range(W):
                acc = 0.0 if bias is None else float(bias[o])
                for c in range(C_in):
                    for m in range(kh):
                        for n in range(kw):
                            r = i + dilation * m - pad_h
                            s = j + dilation * n - pad_w
                            if 0 <= r < H and 0 <= s < W:
                                acc += float(x[c, r, s]) * float(w[o, c, m, n])
                out[o, i, j] = acc
    return out


def _sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def lstm_cell_loops(x, h, c, weight, bias):
    """Scalar per-gate LSTM step; gate blocks ordered (input, forget, cell, output)."""
    n = len(h)
    xh = list(x) + list(h)
    pre = []
    for r in range(4 * n):
        acc = float(bias[r])
        for k, v in enumerate(xh):
            acc += float(weight[r, k]) * float(v)
        pre.append(acc)
    h_new, c_new = np.zeros(n), np.zeros(n)
    for u in range(n):
        i = _sigmoid(pre[u])
        f = _sigmoid(pre[n + u])
        g = math.tanh(pre[2 * n + u])
        o = _sigmoid(pre[3 * n + u])
        c_new[u] = f * float(c[u]) + i * g
        h_new[u] = o * math.tanh(c_new[u])
    return h_new, c_new


def mse_loops(a, b):
    a, b = np.asarray(a, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()
    total = 0.0
    for u, v in zip(a, b):
        total += (u - v) ** 2
    return total / len(a)


def nmse_db_loops(H, E):
    ratios = []
    for h, e in zip(H, E):
        num = sum((float(u) - float(v)) ** 2 for u, v in zip(np.ravel(h), np.ravel(e)))
        den = sum(float(u) ** 2 for u in np.ravel(h))
        ratios.append(num / den)
    return 10 * math.log10(sum(ratios) / len(ratios))


def finite_difference(f, arrays, eps=1e-6, max_entries=None, rng=None):
    """Central differences of scalar ``f()`` w.r.t. entries of each array in ``arrays``
    (perturbed in place). Returns a list of ``(index_array, values)`` per array."""
    out = []
    for arr in arrays:
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_entries,
                                                                   replace=False))
        vals = np.empty(len(idx))
        for k, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + eps
            up = f()
            flat[i] = old - eps
            down = f()
            flat[i] = old
            vals[k] = (up - down) / (2 * eps)
        out.append((idx, vals))
    return out


def relative_error(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))
