"""Hot numeric kernels with a numba path and a pure-numpy path.

Each ``*_numba`` / ``*_numpy`` pair performs the same floating-point operations
in the same order, so the two paths agree bit-for-bit.  The public names pick
one according to ``liera_lab._accel.USE_NUMBA``.
"""
import math

import numpy as np

from . import _accel
from ._accel import optional_njit

# ---------------------------------------------------------------- matmul


@optional_njit(cache=True)
def matmul_numba(a, b):
    n, r = a.shape
    m = b.shape[1]
    c = np.zeros((n, m), dtype=a.dtype)
    for i in range(n):
        for k in range(r):
            aik = a[i, k]
            for j in range(m):
                c[i, j] += aik * b[k, j]
    return c


def matmul_numpy(a, b):
    c = np.zeros((a.shape[0], b.shape[1]), dtype=a.dtype)
    for k in range(a.shape[1]):
        c += a[:, k : k + 1] * b[k : k + 1, :]
    return c


# ---------------------------------------------------------------- im2col / col2im


@optional_njit(cache=True)
def im2col_numba(x, k, stride, pad, out_h, out_w):
    batch, chans, height, width = x.shape
    cols = np.zeros((chans * k * k, batch * out_h * out_w), dtype=x.dtype)
    for c in range(chans):
        for ki in range(k):
            for kj in range(k):
                row = (c * k + ki) * k + kj
                for b in range(batch):
                    for oh in range(out_h):
                        y = oh * stride + ki - pad
                        if y < 0 or y >= height:
                            continue
                        for ow in range(out_w):
                            xx = ow * stride + kj - pad
                            if xx < 0 or xx >= width:
                                continue
                            cols[row, (b * out_h + oh) * out_w + ow] = x[b, c, y, xx]
    return cols


def im2col_numpy(x, k, stride, pad, out_h, out_w):
    batch, chans = x.shape[:2]
    img = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((chans, k, k, batch, out_h, out_w), dtype=x.dtype)
    for ki in range(k):
        y_max = ki + stride * out_h
        for kj in range(k):
            x_max = kj + stride * out_w
            cols[:, ki, kj] = img[:, :, ki:y_max:stride, kj:x_max:stride].transpose(1, 0, 2, 3)
    return cols.reshape(chans * k * k, batch * out_h * out_w)


@optional_njit(cache=True)
def col2im_numba(cols, batch, chans, height, width, k, stride, pad, out_h, out_w):
    img = np.zeros((batch, chans, height + 2 * pad, width + 2 * pad), dtype=cols.dtype)
    for c in range(chans):
        for ki in range(k):
            for kj in range(k):
                row = (c * k + ki) * k + kj
                for b in range(batch):
                    for oh in range(out_h):
                        y = oh * stride + ki
                        for ow in range(out_w):
                            img[b, c, y, ow * stride + kj] += cols[row, (b * out_h + oh) * out_w + ow]
    return img[:, :, pad : pad + height, pad : pad + width].copy()


def col2im_numpy(cols, batch, chans, height, width, k, stride, pad, out_h, out_w):
    img = np.zeros((batch, chans, height + 2 * pad, width + 2 * pad), dtype=cols.dtype)
    blocks = cols.reshape(chans, k, k, batch, out_h, out_w).transpose(3, 0, 1, 2, 4, 5)
    for ki in range(k):
        y_max = ki + stride * out_h
        for kj in range(k):
            x_max = kj + stride * out_w
            img[:, :, ki:y_max:stride, kj:x_max:stride] += blocks[:, :, ki, kj]
    return img[:, :, pad : pad + height, pad : pad + width].copy()


# ---------------------------------------------------------------- one-sided Jacobi SVD


@optional_njit(cache=True)
def jacobi_sweeps_numba(u, tol, max_sweeps):
    m, n = u.shape
    for sweep in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for i in range(m):
                    alpha += u[i, p] * u[i, p]
                for i in range(m):
                    beta += u[i, q] * u[i, q]
                for i in range(m):
                    gamma += u[i, p] * u[i, q]
                if gamma == 0.0 or abs(gamma) <= tol * math.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = (1.0 if zeta >= 0.0 else -1.0) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                cs = 1.0 / math.sqrt(1.0 + t * t)
                sn = cs * t
                for i in range(m):
                    up = u[i, p]
                    uq = u[i, q]
                    u[i, p] = cs * up - sn * uq
                    u[i, q] = sn * up + cs * uq
        if not rotated:
            return sweep + 1
    return -1


def jacobi_sweeps_numpy(u, tol, max_sweeps):
    n = u.shape[1]
    for sweep in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                up = u[:, p].copy()
                uq = u[:, q].copy()
                # cumsum accumulates strictly left to right, matching the loop kernel
                alpha = float(np.cumsum(up * up)[-1])
                beta = float(np.cumsum(uq * uq)[-1])
                gamma = float(np.cumsum(up * uq)[-1])
                if gamma == 0.0 or abs(gamma) <= tol * math.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = (1.0 if zeta >= 0.0 else -1.0) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                cs = 1.0 / math.sqrt(1.0 + t * t)
                sn = cs * t
                u[:, p] = cs * up - sn * uq
                u[:, q] = sn * up + cs * uq
        if not rotated:
            return sweep + 1
    return -1


@optional_njit(cache=True)
def column_norms_numba(u):
    m, n = u.shape
    out = np.empty(n)
    for j in range(n):
        acc = 0.0
        for i in range(m):
            acc += u[i, j] * u[i, j]
        out[j] = math.sqrt(acc)
    return out


def column_norms_numpy(u):
    return np.sqrt(np.cumsum(u * u, axis=0)[-1])


# ---------------------------------------------------------------- dispatch


def matmul(a, b):
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b)
    return (matmul_numba if _accel.USE_NUMBA else matmul_numpy)(a, b)


def im2col(x, k, stride, pad, out_h, out_w):
    x = np.ascontiguousarray(x)
    return (im2col_numba if _accel.USE_NUMBA else im2col_numpy)(x, k, stride, pad, out_h, out_w)


def col2im(cols, shape, k, stride, pad, out_h, out_w):
    cols = np.ascontiguousarray(cols)
    batch, chans, height, width = shape
    fn = col2im_numba if _accel.USE_NUMBA else col2im_numpy
    return fn(cols, batch, chans, height, width, k, stride, pad, out_h, out_w)


def jacobi_sweeps(u, tol, max_sweeps):
    """Orthogonalize the columns of ``u`` in place; returns sweeps used or -1."""
    return (jacobi_sweeps_numba if _accel.USE_NUMBA else jacobi_sweeps_numpy)(u, tol, max_sweeps)


def column_norms(u):
    u = np.ascontiguousarray(u)
    return (column_norms_numba if _accel.USE_NUMBA else column_norms_numpy)(u)
