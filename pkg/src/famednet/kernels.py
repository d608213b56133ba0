"""Compiled inner loops for the memory-bound tensor ops.

All kernels take ``(P, H, W)`` views (batch and channel flattened) or
``(N, C, HW)`` views for batch norm, and write into preallocated outputs.
"""

import numba
import numpy as np

_jit = numba.njit(cache=True, nogil=True, fastmath=False)


@_jit
def window_counts(n, p):
    c = np.empty(n, dtype=np.float64)
    for i in range(n):
        c[i] = min(i + p, n - 1) - max(i - p, 0) + 1
    return c


@_jit
def avg_pool(x, r, out, pre_divide):
    """Stride-1 r x r window mean excluding padding.

    With ``pre_divide`` the input is divided by the window counts before the
    windowed sum (the adjoint used by the backward pass).
    """
    P, H, W = x.shape
    p = (r - 1) // 2
    ch = window_counts(H, p)
    cw = window_counts(W, p)
    inv = np.empty((H, W))
    for y in range(H):
        for xx in range(W):
            inv[y, xx] = 1.0 / (ch[y] * cw[xx])
    lo_w = np.empty(W, np.int64)
    hi_w = np.empty(W, np.int64)
    for xx in range(W):
        lo_w[xx] = max(xx - p, 0)
        hi_w[xx] = min(xx + p, W - 1) + 1
    pre = np.empty(W + 1)
    rows = np.empty((H + 1, W))
    for i in range(P):
        rows[0, :] = 0.0
        for y in range(H):
            pre[0] = 0.0
            if pre_divide:
                for xx in range(W):
                    pre[xx + 1] = pre[xx] + x[i, y, xx] * inv[y, xx]
            else:
                for xx in range(W):
                    pre[xx + 1] = pre[xx] + x[i, y, xx]
            # rows holds the running column prefix of the horizontal window sums
            for xx in range(W):
                rows[y + 1, xx] = rows[y, xx] + pre[hi_w[xx]] - pre[lo_w[xx]]
        for y in range(H):
            a = max(y - p, 0)
            b = min(y + p, H - 1) + 1
            if pre_divide:
                for xx in range(W):
                    out[i, y, xx] = rows[b, xx] - rows[a, xx]
            else:
                for xx in range(W):
                    out[i, y, xx] = (rows[b, xx] - rows[a, xx]) * inv[y, xx]
    return out


@_jit
def max_pool(x, r, out, arg_w, arg_h):
    """Separable running max; ties go to the first element in row-major window order."""
    P, H, W = x.shape
    p = (r - 1) // 2
    rows = np.empty((H, W), dtype=x.dtype)
    for i in range(P):
        for y in range(H):
            for xx in range(W):
                lo = max(xx - p, 0)
                hi = min(xx + p, W - 1)
                best = x[i, y, lo]
                bk = lo
                for j in range(lo + 1, hi + 1):
                    v = x[i, y, j]
                    if v > best:
                        best = v
                        bk = j
                rows[y, xx] = best
                arg_w[i, y, xx] = bk - xx + p
        for y in range(H):
            lo = max(y - p, 0)
            hi = min(y + p, H - 1)
            for xx in range(W):
                best = rows[lo, xx]
                bk = lo
                for j in range(lo + 1, hi + 1):
                    v = rows[j, xx]
                    if v > best:
                        best = v
                        bk = j
                out[i, y, xx] = best
                arg_h[i, y, xx] = bk - y + p
    return out


@_jit
def max_pool_backward(d, r, arg_w, arg_h, dx):
    P, H, W = d.shape
    p = (r - 1) // 2
    drows = np.empty((H, W), dtype=d.dtype)
    for i in range(P):
        drows[:, :] = 0
        for y in range(H):
            for xx in range(W):
                drows[y + arg_h[i, y, xx] - p, xx] += d[i, y, xx]
        for y in range(H):
            for xx in range(W):
                dx[i, y, xx] = 0
        for y in range(H):
            for xx in range(W):
                dx[i, y, xx + arg_w[i, y, xx] - p] += drows[y, xx]
    return dx


@_jit
def channel_moments(x):
    """Per-channel mean and biased variance over (N, HW), float64 accumulation."""
    N, C, M = x.shape
    mean = np.zeros(C)
    var = np.zeros(C)
    for c in range(C):
        s = 0.0
        for n in range(N):
            for k in range(M):
                s += x[n, c, k]
        mu = s / (N * M)
        q = 0.0
        for n in range(N):
            for k in range(M):
                v = x[n, c, k] - mu
                q += v * v
        mean[c] = mu
        var[c] = q / (N * M)
    return mean, var


@_jit
def affine(x, scale, shift, out):
    N, C, M = x.shape
    for n in range(N):
        for c in range(C):
            a = scale[c]
            b = shift[c]
            for k in range(M):
                out[n, c, k] = x[n, c, k] * a + b
    return out


@_jit
def bn_backward(dout, x, mean, inv_std, gamma, dx):
    """Train-mode batch-norm input gradient; returns (dgamma, dbeta)."""
    N, C, M = x.shape
    m = N * M
    dgamma = np.zeros(C)
    dbeta = np.zeros(C)
    for c in range(C):
        sg = 0.0
        sgx = 0.0
        mu = mean[c]
        iv = inv_std[c]
        for n in range(N):
            for k in range(M):
                g = dout[n, c, k]
                sg += g
                sgx += g * (x[n, c, k] - mu) * iv
        dbeta[c] = sg
        dgamma[c] = sgx
        a = gamma[c] * iv
        mg = sg / m
        mgx = sgx / m
        for n in range(N):
            for k in range(M):
                xh = (x[n, c, k] - mu) * iv
                dx[n, c, k] = a * (dout[n, c, k] - mg - xh * mgx)
    return dgamma, dbeta


@_jit
def relu_mask_grad(dout, out, dx):
    flat_d = dout.ravel()
    flat_o = out.ravel()
    flat_x = dx.ravel()
    for i in range(flat_d.size):
        flat_x[i] = flat_d[i] if flat_o[i] > 0 else 0
    return dx
