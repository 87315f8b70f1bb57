"""Loop kernels compiled with numba; results match the numpy kernels bitwise.

Accumulation order in ``col2im`` follows the numpy version (kernel offset
outermost) so both paths round identically. No fastmath, no prange: training
is single-threaded with a fixed reduction order.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def im2col(xp, kh, kw, stride, ho, wo):
    n = xp.shape[0]
    c = xp.shape[3]
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=xp.dtype)
    for b in range(n):
        for y in range(ho):
            for x in range(wo):
                for i in range(kh):
                    for j in range(kw):
                        for ch in range(c):
                            cols[b, y, x, i, j, ch] = xp[b, y * stride + i, x * stride + j, ch]
    return cols


@njit(cache=True)
def col2im(dcols, hp, wp, stride):
    n, ho, wo, kh, kw, c = dcols.shape
    dxp = np.zeros((n, hp, wp, c), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            for b in range(n):
                for y in range(ho):
                    for x in range(wo):
                        for ch in range(c):
                            dxp[b, y * stride + i, x * stride + j, ch] += dcols[b, y, x, i, j, ch]
    return dxp


@njit(cache=True)
def maxpool_forward(x, pool, stride):
    n, h, w, c = x.shape
    ho = (h - pool) // stride + 1
    wo = (w - pool) // stride + 1
    out = np.empty((n, ho, wo, c), dtype=x.dtype)
    arg = np.empty((n, ho, wo, c), dtype=np.int8)
    for b in range(n):
        for y in range(ho):
            for xx in range(wo):
                for ch in range(c):
                    best = x[b, y * stride, xx * stride, ch]
                    k = 0
                    for i in range(pool):
                        for j in range(pool):
                            v = x[b, y * stride + i, xx * stride + j, ch]
                            if v > best:
                                best = v
                                k = i * pool + j
                    out[b, y, xx, ch] = best
                    arg[b, y, xx, ch] = k
    return out, arg


@njit(cache=True)
def _maxpool_backward(dout, arg, dx, pool, stride):
    n, ho, wo, c = dout.shape
    for b in range(n):
        for y in range(ho):
            for xx in range(wo):
                for ch in range(c):
                    k = arg[b, y, xx, ch]
                    i = k // pool
                    j = k - i * pool
                    dx[b, y * stride + i, xx * stride + j, ch] += dout[b, y, xx, ch]
    return dx


def maxpool_backward(dout, arg, x_shape, pool, stride):
    dx = np.zeros(x_shape, dtype=dout.dtype)
    return _maxpool_backward(np.ascontiguousarray(dout), arg, dx, pool, stride)


@njit(cache=True)
def bn_train_forward(x2, gamma, beta, eps):
    m, c = x2.shape
    dt = x2.dtype
    s = np.zeros(c)
    for i in range(m):
        for j in range(c):
            s[j] += x2[i, j]
    mean = (s / m).astype(dt)
    q = np.zeros(c)
    for i in range(m):
        for j in range(c):
            d = np.float64(x2[i, j] - mean[j])
            q[j] += d * d
    var = (q / m).astype(dt)
    inv_std = (1.0 / np.sqrt(var.astype(np.float64) + eps)).astype(dt)
    xhat = np.empty_like(x2)
    out = np.empty_like(x2)
    for i in range(m):
        for j in range(c):
            h = (x2[i, j] - mean[j]) * inv_std[j]
            xhat[i, j] = h
            out[i, j] = h * gamma[j] + beta[j]
    return out, xhat, inv_std, mean, var


@njit(cache=True)
def bn_backward(dout2, xhat2, gamma, inv_std):
    m, c = dout2.shape
    dt = dout2.dtype
    sb = np.zeros(c)
    sg = np.zeros(c)
    for i in range(m):
        for j in range(c):
            sb[j] += dout2[i, j]
            sg[j] += dout2[i, j] * xhat2[i, j]
    k1 = (gamma * sb / m).astype(dt)
    k2 = (gamma * sg / m).astype(dt)
    dx = np.empty_like(dout2)
    for i in range(m):
        for j in range(c):
            dx[i, j] = (dout2[i, j] * gamma[j] - k1[j] - xhat2[i, j] * k2[j]) * inv_std[j]
    return dx, sg.astype(dt), sb.astype(dt)
