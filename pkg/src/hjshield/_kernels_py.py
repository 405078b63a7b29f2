"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``.

Same signatures and same floating-point semantics up to operation order.
"""

import numpy as np


def _one_sided(V, axis, h):
    """Backward/forward differences along a bounded axis with edge extrapolation."""
    d = np.diff(V, axis=axis) / h
    n = V.shape[axis]
    lo = [slice(None)] * 3
    lo[axis] = slice(0, 1)
    hi = [slice(None)] * 3
    hi[axis] = slice(n - 2, n - 1)
    dm = np.concatenate([d[tuple(lo)], d], axis=axis)
    dp = np.concatenate([d, d[tuple(hi)]], axis=axis)
    return dm, dp


def lf_sweep(V, out, xs, ys, cos_th, sin_th, dx, dy, dth, v, wmax, ath, dt):
    dxm, dxp = _one_sided(V, 0, dx)
    dym, dyp = _one_sided(V, 1, dy)
    dtm = (V - np.roll(V, 1, axis=2)) / dth
    dtp = (np.roll(V, -1, axis=2) - V) / dth
    qx = 0.5 * (dxm + dxp)
    qy = 0.5 * (dym + dyp)
    qt = 0.5 * (dtm + dtp)
    px = xs[:, None, None]
    py = ys[None, :, None]
    c = cos_th[None, None, :]
    s = sin_th[None, None, :]
    ham = (qx * (v * c - v) + qy * v * s
           + wmax * np.abs(qx * py - qy * px - qt)
           - wmax * np.abs(qt))
    ax = np.abs(v * c - v) + wmax * np.abs(py)
    ay = np.abs(v * s) + wmax * np.abs(px)
    diss = 0.5 * (ax * (dxp - dxm) + ay * (dyp - dym) + ath * (dtp - dtm))
    upd = dt * np.minimum(0.0, ham + diss)
    np.add(V, upd, out=out)
    return float(-upd.min()) if upd.size else 0.0


def trilinear(V, x_lo, y_lo, dx, dy, dth, pts, vals, clamped):
    nx, ny, nt = V.shape
    x_hi = x_lo + (nx - 1) * dx
    y_hi = y_lo + (ny - 1) * dy
    px = np.clip(pts[:, 0], x_lo, x_hi)
    py = np.clip(pts[:, 1], y_lo, y_hi)
    clamped[:] = (px != pts[:, 0]) | (py != pts[:, 1])
    fx = (px - x_lo) / dx
    i0 = np.minimum(np.floor(fx).astype(np.intp), nx - 2)
    tx = fx - i0
    fy = (py - y_lo) / dy
    j0 = np.minimum(np.floor(fy).astype(np.intp), ny - 2)
    ty = fy - j0
    th = pts[:, 2] + np.pi
    th = th - 2.0 * np.pi * np.floor(th / (2.0 * np.pi))
    ft = th / dth
    k = np.floor(ft).astype(np.intp)
    tt = ft - k
    k0 = k % nt
    k1 = (k0 + 1) % nt
    c00 = V[i0, j0, k0] * (1 - tx) + V[i0 + 1, j0, k0] * tx
    c10 = V[i0, j0 + 1, k0] * (1 - tx) + V[i0 + 1, j0 + 1, k0] * tx
    c01 = V[i0, j0, k1] * (1 - tx) + V[i0 + 1, j0, k1] * tx
    c11 = V[i0, j0 + 1, k1] * (1 - tx) + V[i0 + 1, j0 + 1, k1] * tx
    c0 = c00 * (1 - ty) + c10 * ty
    c1 = c01 * (1 - ty) + c11 * ty
    vals[:] = c0 * (1 - tt) + c1 * tt
