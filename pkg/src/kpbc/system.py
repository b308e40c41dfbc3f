"""Input-affine systems, their variational coefficient, extended systems and
equilibrium solving.

Every callable attached to an :class:`InputAffineSystem` is expected to
broadcast over leading batch axes: ``g0`` maps ``(..., n) -> (..., n)``,
``g`` maps ``(..., n) -> (..., n, m)``, ``jac_g0`` maps
``(..., n) -> (..., n, n)`` and ``jac_g`` maps ``(..., n) -> (..., m, n, n)``
with ``jac_g(x)[..., i, :, :]`` the Jacobian of the i-th input column.
Callables that only accept single points can be wrapped by passing
``vectorized=False``.
"""

from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np

from .errors import ContractError, SingularPointError, SingularityError, SolverError

__all__ = [
    "InputAffineSystem",
    "EquilibriumPair",
    "ExtendedSystem",
    "VariationalSignal",
    "as_vector",
    "numerical_jacobian",
    "evaluate_f",
    "evaluate_F",
    "variational_rhs",
    "build_extended",
    "find_equilibrium",
]

FD_STEP = 1e-6


def as_vector(value, dim, name="argument"):
    """Return ``value`` as a float array whose last axis has length ``dim``.

    Scalars are accepted when ``dim == 1``.
    """
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        if dim != 1:
            raise ContractError(f"{name}: expected length {dim}, got a scalar")
        arr = arr.reshape(1)
    if arr.shape[-1] != dim:
        raise ContractError(
            f"{name}: expected last dimension {dim}, got shape {arr.shape}")
    return arr


def _pointwise(fun):
    """Lift a single-point callable to one that loops over batch axes."""

    def wrapped(*args):
        arrays = [np.asarray(a, dtype=float) for a in args]
        batch = np.broadcast_shapes(*(a.shape[:-1] for a in arrays))
        if batch == ():
            return np.asarray(fun(*arrays), dtype=float)
        arrays = [np.broadcast_to(a, batch + a.shape[-1:]) for a in arrays]
        out = [np.asarray(fun(*(a[idx] for a in arrays)), dtype=float)
               for idx in np.ndindex(*batch)]
        return np.stack(out).reshape(batch + out[0].shape)

    return wrapped


def numerical_jacobian(fun, x, step=FD_STEP):
    """Central-difference Jacobian of ``fun`` at ``x``.

    The step for coordinate j is ``step * (1 + |x_j|)``. ``fun`` maps
    ``(..., n) -> (..., k)``; the result has shape ``(..., k, n)``.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    columns = []
    for j in range(n):
        h = step * (1.0 + np.abs(x[..., j]))
        xp = x.copy()
        xm = x.copy()
        xp[..., j] += h
        xm[..., j] -= h
        diff = (np.asarray(fun(xp)) - np.asarray(fun(xm))) / (2.0 * h[..., None])
        columns.append(diff)
    return np.stack(columns, axis=-1)


@dataclass(frozen=True, eq=False)
class InputAffineSystem:
    """Input-affine nonlinear system ``x' = g0(x) + g(x) u``, ``y = h(x)``.

    Parameters
    ----------
    n, m : int
        State and input dimensions.
    g0 : callable
        Drift vector field.
    g : callable
        Input matrix field, columns are the input vector fields.
    h : callable, optional
        Output map into R^m.
    jac_g0, jac_g : callable, optional
        Analytic Jacobians. When either is missing, :func:`evaluate_F` falls
        back to central finite differences of ``evaluate_f``.
    name : str
        Registry id of built-in models; empty for user systems.
    params : object
        Model parameters, for built-in models.
    """

    n: int
    m: int
    g0: Callable
    g: Callable
    h: Optional[Callable] = None
    jac_g0: Optional[Callable] = None
    jac_g: Optional[Callable] = None
    name: str = ""
    params: Any = None
    vectorized: bool = field(default=True, repr=False)

    def __post_init__(self):
        if int(self.n) < 1 or int(self.m) < 1:
            raise ContractError("state and input dimensions must be positive")
        if not self.vectorized:
            for attr in ("g0", "g", "h", "jac_g0", "jac_g"):
                fun = getattr(self, attr)
                if fun is not None:
                    object.__setattr__(self, attr, _pointwise(fun))
            object.__setattr__(self, "vectorized", True)

    def f(self, x, u):
        return evaluate_f(self, x, u)

    def F(self, x, u):
        return evaluate_F(self, x, u)

    def drift(self, x):
        x = as_vector(x, self.n, "x")
        out = np.asarray(self.g0(x), dtype=float)
        if out.shape != x.shape:
            raise ContractError(f"g0 returned shape {out.shape}, expected {x.shape}")
        return out

    def input_matrix(self, x):
        x = as_vector(x, self.n, "x")
        out = np.asarray(self.g(x), dtype=float)
        expected = x.shape[:-1] + (self.n, self.m)
        if out.shape != expected:
            raise ContractError(f"g returned shape {out.shape}, expected {expected}")
        return out

    def output(self, x):
        if self.h is None:
            raise ContractError("system has no output map")
        x = as_vector(x, self.n, "x")
        out = np.asarray(self.h(x), dtype=float)
        if out.ndim == x.ndim - 1 and self.m == 1:
            out = out[..., None]
        if out.shape != x.shape[:-1] + (self.m,):
            raise ContractError(f"h returned shape {out.shape}")
        return out


def evaluate_f(sys, x, u):
    """Evaluate ``f(x, u) = g0(x) + sum_i g_i(x) u_i``."""
    x = as_vector(x, sys.n, "x")
    u = as_vector(u, sys.m, "u")
    return sys.drift(x) + np.einsum("...ij,...j->...i", sys.input_matrix(x), u)


def evaluate_F(sys, x, u):
    """Coefficient matrix of the variational system.

    ``F(x, u) = dg0/dx + sum_i (dg_i/dx) u_i``, shape ``(..., n, n)``.

    Raises
    ------
    SingularPointError
        If the model reports a non-differentiable point, or if the
        finite-difference fallback produces non-finite entries.
    """
    x = as_vector(x, sys.n, "x")
    u = as_vector(u, sys.m, "u")
    if sys.jac_g0 is not None and sys.jac_g is not None:
        j0 = np.asarray(sys.jac_g0(x), dtype=float)
        jg = np.asarray(sys.jac_g(x), dtype=float)
        return j0 + np.einsum("...kij,...k->...ij", jg, u)
    u_b = np.broadcast_to(u, np.broadcast_shapes(x.shape[:-1], u.shape[:-1]) + (sys.m,))
    x_b = np.broadcast_to(x, u_b.shape[:-1] + (sys.n,))
    with np.errstate(all="ignore"):
        jac = numerical_jacobian(lambda xx: evaluate_f(sys, xx, u_b), x_b)
    bad = ~np.isfinite(jac)
    if bad.any():
        coord = int(np.argwhere(bad.any(axis=-2))[0][-1])
        raise SingularPointError(
            f"F(x,u) is not finite near coordinate x[{coord}]", coordinate=coord)
    return jac


def variational_rhs(sys, x, u, delta_x, delta_u):
    """Right-hand side ``F(x,u) dx + g(x) du`` of the variational system."""
    delta_x = as_vector(delta_x, sys.n, "delta_x")
    delta_u = as_vector(delta_u, sys.m, "delta_u")
    return (np.einsum("...ij,...j->...i", evaluate_F(sys, x, u), delta_x)
            + np.einsum("...ij,...j->...i", sys.input_matrix(x), delta_u))


@dataclass(frozen=True)
class VariationalSignal:
    """Tangent signals ``(dx, du, dy)`` of the prolonged system."""

    delta_x: np.ndarray
    delta_u: np.ndarray
    delta_y: np.ndarray

    def check(self, sys):
        as_vector(self.delta_x, sys.n, "delta_x")
        as_vector(self.delta_u, sys.m, "delta_u")
        as_vector(self.delta_y, sys.m, "delta_y")
        return self


@dataclass(frozen=True)
class EquilibriumPair:
    """A state/input pair with ``f(x*, u*) = 0`` up to ``residual``."""

    x_star: np.ndarray
    u_star: np.ndarray
    residual: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x_star", np.atleast_1d(np.asarray(self.x_star, dtype=float)))
        object.__setattr__(self, "u_star", np.atleast_1d(np.asarray(self.u_star, dtype=float)))
        if self.residual < 0:
            raise ContractError("residual must be non-negative")

    def distance(self, x):
        """Euclidean distance from states ``x`` (..., n) to ``x_star``."""
        return np.linalg.norm(np.asarray(x, dtype=float) - self.x_star, axis=-1)

    def to_dict(self):
        return {"x_star": self.x_star.tolist(), "u_star": self.u_star.tolist(),
                "residual": float(self.residual)}


@dataclass(frozen=True, eq=False)
class ExtendedSystem:
    """Cascade of a base system with integrators on every input channel.

    State is ``z = (x, u)`` of dimension ``n + m``; input is ``u_K = u'``;
    output is ``h_K(x, u)``.
    """

    base: InputAffineSystem
    h_K: Callable

    @property
    def n(self):
        return self.base.n + self.base.m

    @property
    def m(self):
        return self.base.m

    def split(self, z):
        z = as_vector(z, self.n, "z")
        return z[..., : self.base.n], z[..., self.base.n:]

    def drift(self, z):
        x, u = self.split(z)
        return np.concatenate([evaluate_f(self.base, x, u), np.zeros_like(u)], axis=-1)

    def input_matrix(self, z):
        z = as_vector(z, self.n, "z")
        out = np.zeros(z.shape[:-1] + (self.n, self.m))
        out[..., self.base.n:, :] = np.eye(self.m)
        return out

    def output(self, z):
        x, u = self.split(z)
        return np.asarray(self.h_K(x, u), dtype=float)

    def field(self, z, u_K):
        u_K = as_vector(u_K, self.m, "u_K")
        return self.drift(z) + np.einsum("...ij,...j->...i", self.input_matrix(z), u_K)

    def _jac_drift(self, z):
        x, u = self.split(z)
        n = self.base.n
        out = np.zeros(z.shape[:-1] + (self.n, self.n))
        out[..., :n, :n] = evaluate_F(self.base, x, u)
        out[..., :n, n:] = self.base.input_matrix(x)
        return out

    def as_input_affine(self):
        """View the extended system as an :class:`InputAffineSystem` on (x, u)."""
        return InputAffineSystem(
            n=self.n, m=self.m, g0=self.drift, g=self.input_matrix,
            h=lambda z: self.output(z), jac_g0=self._jac_drift,
            jac_g=lambda z: np.zeros(np.shape(z)[:-1] + (self.m, self.n, self.n)),
            name=f"extended:{self.base.name}" if self.base.name else "extended")


def build_extended(sys, h_K):
    """Build the extended system ``x' = f(x,u), u' = u_K, y_K = h_K(x,u)``."""
    if not callable(h_K):
        raise ContractError("h_K must be callable with signature (x, u)")
    ext = ExtendedSystem(sys, h_K)
    probe = ext.output(np.zeros(ext.n))
    if np.shape(probe)[-1:] != (sys.m,):
        raise ContractError(f"h_K must return a vector in R^{sys.m}")
    return ext


def _rank_ok(J):
    s = np.linalg.svd(J, compute_uv=False)
    return s.size > 0 and s[-1] > 1e-12 * max(s[0], 1.0)


def find_equilibrium(sys, x0, u0, mode="fix-u", tol=1e-10, max_iter=200, max_halvings=40):
    """Solve ``f(x, u) = 0`` by damped Newton iteration.

    In ``"fix-u"`` mode the input stays at ``u0`` and Newton's method is
    applied in ``x``. In ``"free-u"`` mode ``(x, u)`` are both unknown and a
    minimum-norm Gauss-Newton step is taken on the underdetermined system.
    Each step is halved until the residual norm decreases.

    Returns
    -------
    EquilibriumPair

    Raises
    ------
    SingularityError
        The Jacobian is rank deficient at an iterate.
    SolverError
        No convergence within ``max_iter`` iterations, or no decrease
        after ``max_halvings`` step halvings.
    """
    if mode not in ("fix-u", "free-u"):
        raise ContractError(f"unknown mode {mode!r}")
    x = as_vector(x0, sys.n, "x0").astype(float).copy()
    u = as_vector(u0, sys.m, "u0").astype(float).copy()
    if x.ndim != 1 or u.ndim != 1:
        raise ContractError("find_equilibrium works on a single point")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
        raise ContractError("initial guess must be finite")

    def residual(xx, uu):
        return float(np.linalg.norm(evaluate_f(sys, xx, uu)))

    res = residual(x, u)
    for _ in range(max_iter):
        if res <= tol:
            return EquilibriumPair(x, u, res)
        fx = evaluate_f(sys, x, u)
        F = evaluate_F(sys, x, u)
        if mode == "fix-u":
            if not _rank_ok(F):
                raise SingularityError("singular Jacobian at iterate", x, u, res)
            dx = np.linalg.solve(F, -fx)
            du = np.zeros_like(u)
        else:
            J = np.hstack([F, sys.input_matrix(x)])
            if not _rank_ok(J) or np.linalg.matrix_rank(J) < sys.n:
                raise SingularityError("rank-deficient Jacobian at iterate", x, u, res)
            step = np.linalg.lstsq(J, -fx, rcond=None)[0]
            dx, du = step[: sys.n], step[sys.n:]
        lam = 1.0
        for _ in range(max_halvings + 1):
            trial = residual(x + lam * dx, u + lam * du)
            if np.isfinite(trial) and trial < res:
                break
            lam *= 0.5
        else:
            raise SolverError("step halving failed to reduce the residual", x, u, res)
        x, u, res = x + lam * dx, u + lam * du, trial
    if res <= tol:
        return EquilibriumPair(x, u, res)
    raise SolverError(f"no convergence after {max_iter} iterations", x, u, res)
