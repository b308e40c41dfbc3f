"""Pure-Python RK4 kernel for the Zeta closed loops.

Reference implementation of the compiled kernel in ``_zeta.pyx``; both
share the signature of :func:`rk4_zeta`. Plain floats only, no numpy in the
inner loop.
"""

import math

import numpy as np

KPBC, KPBC1, SPBC = 0, 1, 2


def _plant(x1, x2, x3, x4, u, a1, a2, a3):
    return (-x2 + (1.0 + x2) * u,
            x1 - (x1 + x3) * u,
            (-x4 + (1.0 + x2) * u) / a1,
            (x3 - x4 / a3) / a2)


def _field(kind, z, nu, a1, a2, a3, k, us):
    x1, x2, x3, x4 = z[0], z[1], z[2], z[3]
    if kind == SPBC:
        f1, f2, f3, f4 = _plant(x1, x2, x3, x4, us, a1, a2, a3)
        s = x1 + x3
        y = ((1.0 - us) * s * f1 + (1.0 - us - us / a1) * (1.0 + x2) * f2
             - us * s * f3 + (1.0 + x2) / a1 * f4)
        v = z[4]
        u = us - k[1] * y + k[2] * v
        f1, f2, f3, f4 = _plant(x1, x2, x3, x4, u, a1, a2, a3)
        return (f1, f2, f3, f4, (nu - k[2] * y - k[3] * v) / k[0])
    u = z[4]
    f1, f2, f3, f4 = _plant(x1, x2, x3, x4, u, a1, a2, a3)
    y_K = (1.0 + x2) * (f1 + f3) - (x1 + x3) * f2
    if kind == KPBC:
        uk = z[5]
        return (f1, f2, f3, f4, uk, (nu - k[1] * uk - k[2] * (u - us) - y_K) / k[0])
    return (f1, f2, f3, f4, (nu - k[1] * (u - us) - y_K) / k[0])


def rk4_zeta(kind, a1, a2, a3, gains, u_star, z0, t0, dt, n_steps, stride, nu=None):
    """Integrate a Zeta closed loop with classical RK4.

    Parameters
    ----------
    kind : int
        0 second-order Krasovskii, 1 first-order Krasovskii, 2 shifted.
    gains : sequence of float
        ``(K1, K2, K3)``, ``(K2, K3)`` or ``(K4, K5, K6, K7)`` by kind.
    nu : callable or None
        Scalar exogenous signal ``t -> float``.

    Returns
    -------
    t, z : ndarray
        Recorded samples (every ``stride`` steps plus the final step).
    count : int
        Number of valid rows.
    fail_step : int
        Index of the first step producing a non-finite state, or -1.
    """
    k = [float(g) for g in gains]
    us = float(u_star)
    dim = len(z0)
    n_rec = n_steps // stride + 1 + (1 if n_steps % stride else 0)
    t_out = np.empty(n_rec)
    z_out = np.empty((n_rec, dim))
    z = tuple(float(v) for v in z0)
    t_out[0] = t0
    z_out[0] = z
    rec = 1
    h2 = 0.5 * dt
    h6 = dt / 6.0
    nu_a = nu_b = nu_c = 0.0
    for step in range(n_steps):
        t = t0 + step * dt
        if nu is not None:
            nu_a, nu_b, nu_c = nu(t), nu(t + h2), nu(t + dt)
        k1 = _field(kind, z, nu_a, a1, a2, a3, k, us)
        k2 = _field(kind, [z[i] + h2 * k1[i] for i in range(dim)], nu_b, a1, a2, a3, k, us)
        k3 = _field(kind, [z[i] + h2 * k2[i] for i in range(dim)], nu_b, a1, a2, a3, k, us)
        k4 = _field(kind, [z[i] + dt * k3[i] for i in range(dim)], nu_c, a1, a2, a3, k, us)
        z = tuple(z[i] + h6 * (k1[i] + 2.0 * (k2[i] + k3[i]) + k4[i]) for i in range(dim))
        if not all(math.isfinite(v) for v in z):
            return t_out[:rec], z_out[:rec], rec, step
        if (step + 1) % stride == 0 or step + 1 == n_steps:
            t_out[rec] = t0 + (step + 1) * dt
            z_out[rec] = z
            rec += 1
    return t_out[:rec], z_out[:rec], rec, -1
