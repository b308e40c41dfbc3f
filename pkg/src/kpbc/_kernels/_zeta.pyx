# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled RK4 kernel for the Zeta closed loops.

Same signature and recording rules as :func:`kpbc._kernels._zeta_py.rk4_zeta`.
The step loop runs without the GIL when there is no exogenous signal.
"""

import numpy as np

from libc.math cimport isfinite

cdef enum:
    MAXDIM = 6


cdef inline void _field(int kind, const double* z, double nu, double a1, double a2,
                        double a3, const double* k, double us, double* out) noexcept nogil:
    cdef double x1 = z[0], x2 = z[1], x3 = z[2], x4 = z[3]
    cdef double u, y, f1, f2, f3, f4, s
    if kind == 2:
        s = x1 + x3
        f1 = -x2 + (1.0 + x2) * us
        f2 = x1 - s * us
        f3 = (-x4 + (1.0 + x2) * us) / a1
        f4 = (x3 - x4 / a3) / a2
        y = ((1.0 - us) * s * f1 + (1.0 - us - us / a1) * (1.0 + x2) * f2
             - us * s * f3 + (1.0 + x2) / a1 * f4)
        u = us - k[1] * y + k[2] * z[4]
    else:
        u = z[4]
    f1 = -x2 + (1.0 + x2) * u
    f2 = x1 - (x1 + x3) * u
    f3 = (-x4 + (1.0 + x2) * u) / a1
    f4 = (x3 - x4 / a3) / a2
    out[0] = f1
    out[1] = f2
    out[2] = f3
    out[3] = f4
    if kind == 2:
        out[4] = (nu - k[2] * y - k[3] * z[4]) / k[0]
        return
    y = (1.0 + x2) * (f1 + f3) - (x1 + x3) * f2
    if kind == 0:
        out[4] = z[5]
        out[5] = (nu - k[1] * z[5] - k[2] * (u - us) - y) / k[0]
    else:
        out[4] = (nu - k[1] * (u - us) - y) / k[0]


cdef inline bint _step(int kind, int dim, double* z, double dt, double nu_a, double nu_b,
                       double nu_c, double a1, double a2, double a3, const double* k,
                       double us) noexcept nogil:
    cdef double k1[MAXDIM]
    cdef double k2[MAXDIM]
    cdef double k3[MAXDIM]
    cdef double k4[MAXDIM]
    cdef double tmp[MAXDIM]
    cdef double h2 = 0.5 * dt, h6 = dt / 6.0
    cdef int i
    cdef bint ok = True
    _field(kind, z, nu_a, a1, a2, a3, k, us, k1)
    for i in range(dim):
        tmp[i] = z[i] + h2 * k1[i]
    _field(kind, tmp, nu_b, a1, a2, a3, k, us, k2)
    for i in range(dim):
        tmp[i] = z[i] + h2 * k2[i]
    _field(kind, tmp, nu_b, a1, a2, a3, k, us, k3)
    for i in range(dim):
        tmp[i] = z[i] + dt * k3[i]
    _field(kind, tmp, nu_c, a1, a2, a3, k, us, k4)
    for i in range(dim):
        z[i] = z[i] + h6 * (k1[i] + 2.0 * (k2[i] + k3[i]) + k4[i])
        if not isfinite(z[i]):
            ok = False
    return ok


def rk4_zeta(int kind, double a1, double a2, double a3, gains, double u_star, z0,
             double t0, double dt, long n_steps, long stride, nu=None):
    cdef int dim = len(z0)
    if dim > MAXDIM or dim < 5:
        raise ValueError("composite state must have 5 or 6 components")
    if stride < 1:
        raise ValueError("stride must be positive")
    cdef double k[4]
    cdef int i
    for i in range(4):
        k[i] = 0.0
    for i in range(len(gains)):
        k[i] = float(gains[i])
    cdef long n_rec = n_steps // stride + 1 + (1 if n_steps % stride else 0)
    t_arr = np.empty(n_rec)
    z_arr = np.empty((n_rec, dim))
    cdef double[::1] t_out = t_arr
    cdef double[:, ::1] z_out = z_arr
    cdef double z[MAXDIM]
    for i in range(dim):
        z[i] = float(z0[i])
        z_out[0, i] = z[i]
    t_out[0] = t0
    cdef long rec = 1, step, fail = -1
    cdef double t, nu_a = 0.0, nu_b = 0.0, nu_c = 0.0
    if nu is None:
        with nogil:
            for step in range(n_steps):
                if not _step(kind, dim, z, dt, 0.0, 0.0, 0.0, a1, a2, a3, k, u_star):
                    fail = step
                    break
                if (step + 1) % stride == 0 or step + 1 == n_steps:
                    t_out[rec] = t0 + (step + 1) * dt
                    for i in range(dim):
                        z_out[rec, i] = z[i]
                    rec += 1
    else:
        for step in range(n_steps):
            t = t0 + step * dt
            nu_a = nu(t)
            nu_b = nu(t + 0.5 * dt)
            nu_c = nu(t + dt)
            if not _step(kind, dim, z, dt, nu_a, nu_b, nu_c, a1, a2, a3, k, u_star):
                fail = step
                break
            if (step + 1) % stride == 0 or step + 1 == n_steps:
                t_out[rec] = t0 + (step + 1) * dt
                for i in range(dim):
                    z_out[rec, i] = z[i]
                rec += 1
    return t_arr[:rec], z_arr[:rec], rec, fail
