"""Reference kernels in plain numpy (vectorized over the batch)."""
import numpy as np


def im2col(xp, kh, kw, stride, ho, wo):
    """Patches of a padded NHWC input as ``(N, ho, wo, kh, kw, C)``."""
    n, _, _, c = xp.shape
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    return cols


def col2im(dcols, hp, wp, stride):
    """Adjoint of :func:`im2col`: scatter-add patches back onto the padded input."""
    n, ho, wo, kh, kw, c = dcols.shape
    dxp = np.zeros((n, hp, wp, c), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
    return dxp


def maxpool_forward(x, pool, stride):
    n, h, w, c = x.shape
    ho = (h - pool) // stride + 1
    wo = (w - pool) // stride + 1
    win = np.empty((n, ho, wo, c, pool * pool), dtype=x.dtype)
    for i in range(pool):
        for j in range(pool):
            win[..., i * pool + j] = x[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    arg = np.argmax(win, axis=-1).astype(np.int8)
    out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return out, arg


def maxpool_backward(dout, arg, x_shape, pool, stride):
    n, ho, wo, c = dout.shape
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for i in range(pool):
        for j in range(pool):
            hit = arg == i * pool + j
            dx[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += np.where(hit, dout, 0)
    return dx


def bn_train_forward(x2, gamma, beta, eps):
    """Batch-statistics BatchNorm over rows of ``x2`` ``[M, C]``.

    Returns ``(out, xhat, inv_std, mean, var)``; statistics accumulate in f64.
    """
    dt = x2.dtype
    mean = x2.mean(axis=0, dtype=np.float64)
    var = np.square(x2 - mean.astype(dt), dtype=np.float64).mean(axis=0)
    mean, var = mean.astype(dt), var.astype(dt)
    inv_std = (1.0 / np.sqrt(var.astype(np.float64) + eps)).astype(dt)
    xhat = (x2 - mean) * inv_std
    return xhat * gamma + beta, xhat, inv_std, mean, var


def bn_backward(dout2, xhat2, gamma, inv_std):
    """Returns ``(dx, dgamma, dbeta)`` for the train-mode BatchNorm."""
    dt = dout2.dtype
    m = dout2.shape[0]
    dbeta = dout2.sum(axis=0, dtype=np.float64)
    dgamma = (dout2 * xhat2).sum(axis=0, dtype=np.float64)
    # dxhat = dout * gamma, so its reductions are gamma * (dbeta, dgamma)
    k1 = (gamma * dbeta / m).astype(dt)
    k2 = (gamma * dgamma / m).astype(dt)
    dx = (dout2 * gamma - k1 - xhat2 * k2) * inv_std
    return dx, dgamma.astype(dt), dbeta.astype(dt)
