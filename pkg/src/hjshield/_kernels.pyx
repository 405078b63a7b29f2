# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: one Lax-Friedrichs sweep and trilinear grid queries."""

from libc.math cimport fabs, floor, fmin, M_PI

import numpy as np
cimport numpy as cnp

cnp.import_array()


def lf_sweep(double[:, :, ::1] V, double[:, :, ::1] out,
             double[::1] xs, double[::1] ys,
             double[::1] cos_th, double[::1] sin_th,
             double dx, double dy, double dth,
             double v, double wmax, double ath, double dt):
    """Write the swept field into ``out`` and return the max-norm change.

    Dissipation is local Lax-Friedrichs: per node, the bound on |dH/dq|
    over both control sets; ``ath`` is the (constant) theta-axis bound.
    """
    cdef Py_ssize_t nx = V.shape[0], ny = V.shape[1], nt = V.shape[2]
    cdef Py_ssize_t i, j, k, km, kp
    cdef double dxm, dxp, dym, dyp, dtm, dtp, qx, qy, qt
    cdef double px, py, c, s, ham, diss, upd, dmax = 0.0, val, ax, ay
    with nogil:
        for i in range(nx):
            px = xs[i]
            for j in range(ny):
                py = ys[j]
                for k in range(nt):
                    km = k - 1 if k > 0 else nt - 1
                    kp = k + 1 if k < nt - 1 else 0
                    val = V[i, j, k]
                    if i == 0:
                        dxp = (V[1, j, k] - val) / dx
                        dxm = dxp
                    elif i == nx - 1:
                        dxm = (val - V[i - 1, j, k]) / dx
                        dxp = dxm
                    else:
                        dxm = (val - V[i - 1, j, k]) / dx
                        dxp = (V[i + 1, j, k] - val) / dx
                    if j == 0:
                        dyp = (V[i, 1, k] - val) / dy
                        dym = dyp
                    elif j == ny - 1:
                        dym = (val - V[i, j - 1, k]) / dy
                        dyp = dym
                    else:
                        dym = (val - V[i, j - 1, k]) / dy
                        dyp = (V[i, j + 1, k] - val) / dy
                    dtm = (val - V[i, j, km]) / dth
                    dtp = (V[i, j, kp] - val) / dth
                    qx = 0.5 * (dxm + dxp)
                    qy = 0.5 * (dym + dyp)
                    qt = 0.5 * (dtm + dtp)
                    c = cos_th[k]
                    s = sin_th[k]
                    ham = (qx * (v * c - v) + qy * v * s
                           + wmax * fabs(qx * py - qy * px - qt)
                           - wmax * fabs(qt))
                    ax = fabs(v * c - v) + wmax * fabs(py)
                    ay = fabs(v * s) + wmax * fabs(px)
                    diss = 0.5 * (ax * (dxp - dxm) + ay * (dyp - dym)
                                  + ath * (dtp - dtm))
                    upd = dt * fmin(0.0, ham + diss)
                    out[i, j, k] = val + upd
                    if -upd > dmax:
                        dmax = -upd
    return dmax


def trilinear(const double[:, :, ::1] V, double x_lo, double y_lo,
              double dx, double dy, double dth,
              const double[:, ::1] pts, double[::1] vals, cnp.uint8_t[::1] clamped):
    """Periodic-in-theta trilinear interpolation of ``V`` at ``pts``."""
    cdef Py_ssize_t nx = V.shape[0], ny = V.shape[1], nt = V.shape[2]
    cdef Py_ssize_t m, n = pts.shape[0], i0, j0, k0, k1
    cdef double x_hi = x_lo + (nx - 1) * dx, y_hi = y_lo + (ny - 1) * dy
    cdef double fx, fy, ft, tx, ty, tt, px, py, th, two_pi = 2.0 * M_PI
    cdef double c00, c01, c10, c11, c0, c1
    cdef cnp.uint8_t flag
    with nogil:
        for m in range(n):
            px = pts[m, 0]
            py = pts[m, 1]
            th = pts[m, 2]
            flag = 0
            if px < x_lo:
                px = x_lo
                flag = 1
            elif px > x_hi:
                px = x_hi
                flag = 1
            if py < y_lo:
                py = y_lo
                flag = 1
            elif py > y_hi:
                py = y_hi
                flag = 1
            fx = (px - x_lo) / dx
            i0 = <Py_ssize_t>floor(fx)
            if i0 > nx - 2:
                i0 = nx - 2
            tx = fx - i0
            fy = (py - y_lo) / dy
            j0 = <Py_ssize_t>floor(fy)
            if j0 > ny - 2:
                j0 = ny - 2
            ty = fy - j0
            th = th + M_PI
            th = th - two_pi * floor(th / two_pi)
            ft = th / dth
            k0 = <Py_ssize_t>floor(ft)
            tt = ft - k0
            k0 = k0 % nt
            k1 = (k0 + 1) % nt
            c00 = V[i0, j0, k0] * (1 - tx) + V[i0 + 1, j0, k0] * tx
            c10 = V[i0, j0 + 1, k0] * (1 - tx) + V[i0 + 1, j0 + 1, k0] * tx
            c01 = V[i0, j0, k1] * (1 - tx) + V[i0 + 1, j0, k1] * tx
            c11 = V[i0, j0 + 1, k1] * (1 - tx) + V[i0 + 1, j0 + 1, k1] * tx
            c0 = c00 * (1 - ty) + c10 * ty
            c1 = c01 * (1 - ty) + c11 * ty
            vals[m] = c0 * (1 - tt) + c1 * tt
            clamped[m] = flag
