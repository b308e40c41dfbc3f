"""Built-in systems: the averaged DC-Zeta converter, the cube-root example
and small linear benchmarks, plus a string-keyed registry for the CLI."""

from dataclasses import dataclass
from typing import Any, Optional

import numpy as np

from .errors import ContractError, SingularPointError
from .passivity import KrasovskiiStorage
from .system import EquilibriumPair, InputAffineSystem, as_vector, evaluate_f

__all__ = [
    "ZetaParams",
    "CubeRootParams",
    "zeta_system",
    "zeta_equilibrium",
    "zeta_metric",
    "zeta_storage",
    "zeta_krasovskii_output",
    "zeta_shifted_output",
    "EquilibriumFamily",
    "zeta_family",
    "cuberoot_system",
    "cuberoot_storage",
    "cuberoot_krasovskii_output",
    "linear_system",
    "LINEAR_PRESETS",
    "ModelEntry",
    "get_model",
    "MODEL_IDS",
]


@dataclass(frozen=True)
class ZetaParams:
    """Normalized Zeta converter constants and the desired load voltage."""

    alpha1: float = 1.0
    alpha2: float = 1.0
    alpha3: float = 1.0
    v_star: float = 1.0 / 3.0

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "alpha3", "v_star"):
            value = float(getattr(self, name))
            if not (np.isfinite(value) and value > 0):
                raise ContractError(f"{name} must be strictly positive, got {value}")
            object.__setattr__(self, name, value)


@dataclass(frozen=True)
class CubeRootParams:
    """The cube-root example has no parameters."""


def _unpack(x, n):
    x = np.asarray(x, dtype=float)
    return [x[..., i] for i in range(n)]


def zeta_system(p=None):
    """Averaged DC-Zeta converter as an input-affine system (n=4, m=1)."""
    p = ZetaParams() if p is None else p
    a1, a2, a3 = p.alpha1, p.alpha2, p.alpha3
    A = np.array([[0.0, -1.0, 0.0, 0.0],
                  [1.0, 0.0, 0.0, 0.0],
                  [0.0, 0.0, 0.0, -1.0 / a1],
                  [0.0, 0.0, 1.0 / a2, -1.0 / (a2 * a3)]])
    dG = np.array([[[0.0, 1.0, 0.0, 0.0],
                    [-1.0, 0.0, -1.0, 0.0],
                    [0.0, 1.0 / a1, 0.0, 0.0],
                    [0.0, 0.0, 0.0, 0.0]]])

    def g0(x):
        x1, x2, x3, x4 = _unpack(x, 4)
        return np.stack([-x2, x1, -x4 / a1, (x3 - x4 / a3) / a2], axis=-1)

    def g(x):
        x1, x2, x3, x4 = _unpack(x, 4)
        return np.stack([1.0 + x2, -(x1 + x3), (1.0 + x2) / a1, np.zeros_like(x1)],
                        axis=-1)[..., None]

    def jac_g0(x):
        return np.broadcast_to(A, np.shape(x)[:-1] + (4, 4))

    def jac_g(x):
        return np.broadcast_to(dG, np.shape(x)[:-1] + (1, 4, 4))

    return InputAffineSystem(4, 1, g0, g, jac_g0=jac_g0, jac_g=jac_g, name="zeta", params=p)


def zeta_equilibrium(p=None):
    """Closed-form member of the equilibrium family for ``p.v_star``."""
    p = ZetaParams() if p is None else p
    v = p.v_star
    x = np.array([v * v / p.alpha3, v, v / p.alpha3, v])
    u = np.array([v / (v + 1.0)])
    residual = float(np.linalg.norm(evaluate_f(zeta_system(p), x, u)))
    return EquilibriumPair(x, u, residual)


def zeta_metric(p=None):
    p = ZetaParams() if p is None else p
    return np.diag([1.0, 1.0, p.alpha1, p.alpha2])


def zeta_storage(p=None, anchor=None):
    """Canonical storage ``f^T M f / 2`` with ``M = diag(1, 1, alpha1, alpha2)``."""
    p = ZetaParams() if p is None else p
    anchor = zeta_equilibrium(p) if anchor is None else anchor
    return KrasovskiiStorage.canonical(zeta_system(p), zeta_metric(p), anchor)


def zeta_krasovskii_output(p=None):
    """Closed form ``h_K = [1+x2, -(x1+x3), 1+x2, 0] f(x, u)``."""
    sys = zeta_system(p)

    def h_K(x, u):
        x1, x2, x3, _ = _unpack(as_vector(x, 4, "x"), 4)
        f = evaluate_f(sys, x, u)
        return ((1.0 + x2) * (f[..., 0] + f[..., 2]) - (x1 + x3) * f[..., 1])[..., None]

    return h_K


def zeta_shifted_output(p=None):
    """Closed form of ``(dS_K(x, u*)/dx g(x))^T`` for the Zeta storage.

    Equals ``c(x)^T f(x, u*)`` with
    ``c = [(1-u*)(x1+x3), (1-u*-u*/a1)(1+x2), -u*(x1+x3), (1+x2)/a1]``.
    """
    p = ZetaParams() if p is None else p
    sys = zeta_system(p)
    us = zeta_equilibrium(p).u_star[0]
    a1 = p.alpha1

    def h(x):
        x1, x2, x3, _ = _unpack(as_vector(x, 4, "x"), 4)
        f = evaluate_f(sys, x, np.full(np.shape(x1) + (1,), us))
        c = np.stack([(1 - us) * (x1 + x3), (1 - us - us / a1) * (1 + x2),
                      -us * (x1 + x3), (1 + x2) / a1], axis=-1)
        return np.sum(c * f, axis=-1)[..., None]

    return h


class EquilibriumFamily:
    """One-parameter family of equilibria ``v -> (x*(v), u*(v))``.

    Distances are the minimum over ``v`` of ``|x - x*(v)|``, found on a grid
    over ``[v_min, v_max]`` and refined by golden-section search inside the
    bracketing grid cells.
    """

    def __init__(self, state_of, input_of, v_min=0.0, v_max=10.0, grid=401, n=None):
        self.state_of = state_of
        self.input_of = input_of
        self.v_min = float(v_min)
        self.v_max = float(v_max)
        self.grid = int(grid)
        self.n = n

    def point(self, v):
        return EquilibriumPair(self.state_of(np.asarray(v, dtype=float)),
                               self.input_of(np.asarray(v, dtype=float)))

    def _sqdist(self, X, v):
        return np.sum((X - self.state_of(v[..., None]).reshape(v.shape + (-1,))) ** 2, axis=-1)

    def nearest(self, x):
        """Return ``(distance, v)`` arrays for states ``x`` of shape (..., n)."""
        X = np.asarray(x, dtype=float)
        if self.n is not None:
            X = X[..., : self.n]
        shape = X.shape[:-1]
        X = X.reshape(-1, X.shape[-1])
        vs = np.linspace(self.v_min, self.v_max, self.grid)
        P = self.state_of(vs).reshape(self.grid, -1)
        P2 = np.sum(P * P, axis=-1)
        k = np.empty(len(X), dtype=int)
        for start in range(0, len(X), 8192):
            blk = X[start:start + 8192]
            # |x - p|^2 up to the per-row constant |x|^2
            k[start:start + 8192] = np.argmin(P2 - 2.0 * blk @ P.T, axis=-1)
        coarse = self._sqdist(X, vs[k])
        lo = vs[np.maximum(k - 1, 0)]
        hi = vs[np.minimum(k + 1, self.grid - 1)]
        r = (np.sqrt(5.0) - 1.0) / 2.0
        a, b = lo.copy(), hi.copy()
        c, d = b - r * (b - a), a + r * (b - a)
        fc, fd = self._sqdist(X, c), self._sqdist(X, d)
        for _ in range(80):
            left = fc < fd
            a, b = np.where(left, a, c), np.where(left, d, b)
            c_try, d_try = b - r * (b - a), a + r * (b - a)
            f_c, f_d = self._sqdist(X, c_try), self._sqdist(X, d_try)
            c, d, fc, fd = (np.where(left, c_try, d), np.where(left, c, d_try),
                            np.where(left, f_c, fd), np.where(left, fc, f_d))
        v = 0.5 * (a + b)
        refined = self._sqdist(X, v)
        better = refined <= coarse
        v = np.where(better, v, vs[k])
        best = np.where(better, refined, coarse)
        return np.sqrt(best).reshape(shape), v.reshape(shape)

    def distance(self, x):
        return self.nearest(x)[0]


def zeta_family(p=None, v_max=10.0, grid=401):
    """The Zeta equilibrium set parametrized by the load voltage."""
    p = ZetaParams() if p is None else p

    def state_of(v):
        v = np.asarray(v, dtype=float)
        return np.stack([v * v / p.alpha3, v, v / p.alpha3, v], axis=-1)

    def input_of(v):
        v = np.asarray(v, dtype=float)
        return (v / (v + 1.0))[..., None]

    return EquilibriumFamily(state_of, input_of, 0.0, v_max, grid, n=4)


def _check_nonzero(x):
    zero = np.asarray(x) == 0.0
    if zero.any():
        coord = int(np.argwhere(zero)[0][-1])
        raise SingularPointError(
            f"cube-root field is not differentiable at x[{coord}] = 0", coordinate=coord)


def cuberoot_system():
    """Two-state system ``x' = [x1^(1/3); -x2^(1/3)] u`` with ``y = x1^(4/3) - x2^(4/3)``.

    Fractional powers use the real signed cube root.
    """

    def g0(x):
        return np.zeros(np.shape(x))

    def g(x):
        x1, x2 = _unpack(x, 2)
        return np.stack([np.cbrt(x1), -np.cbrt(x2)], axis=-1)[..., None]

    def h(x):
        x1, x2 = _unpack(x, 2)
        return (np.cbrt(x1) ** 4 - np.cbrt(x2) ** 4)[..., None]

    def jac_g0(x):
        return np.zeros(np.shape(x)[:-1] + (2, 2))

    def jac_g(x):
        _check_nonzero(x)
        x1, x2 = _unpack(x, 2)
        out = np.zeros(np.shape(x)[:-1] + (1, 2, 2))
        out[..., 0, 0, 0] = 1.0 / (3.0 * np.cbrt(x1) ** 2)
        out[..., 0, 1, 1] = -1.0 / (3.0 * np.cbrt(x2) ** 2)
        return out

    return InputAffineSystem(2, 1, g0, g, h=h, jac_g0=jac_g0, jac_g=jac_g, name="cuberoot",
                             params=CubeRootParams())


def cuberoot_storage(anchor=None):
    """Storage ``(x1^(2/3) + x2^(2/3)) u^2 / 2`` with analytic gradients."""
    sys = cuberoot_system()
    anchor = EquilibriumPair(np.zeros(2), np.zeros(1)) if anchor is None else anchor

    def value(x, u):
        c = np.cbrt(x)
        return 0.5 * np.sum(c * c, axis=-1) * u[..., 0] ** 2

    def grad_x(x, u):
        _check_nonzero(x)
        return (u[..., 0] ** 2)[..., None] / (3.0 * np.cbrt(x))

    def grad_u(x, u):
        c = np.cbrt(x)
        return (np.sum(c * c, axis=-1) * u[..., 0])[..., None]

    return KrasovskiiStorage.general(sys, value, anchor, grad_x=grad_x, grad_u=grad_u)


def cuberoot_krasovskii_output():
    """Output derivative ``(dh/dx) g(x) u = (4/3)(x1^(2/3) + x2^(2/3)) u``."""

    def h_K(x, u):
        c = np.cbrt(np.asarray(x, dtype=float))
        dh = np.stack([4.0 / 3.0 * c[..., 0], -4.0 / 3.0 * c[..., 1]], axis=-1)
        g = np.stack([c[..., 0], -c[..., 1]], axis=-1)
        return (np.sum(dh * g, axis=-1) * np.asarray(u)[..., 0])[..., None]

    return h_K


def linear_system(A, B, C=None, name="linear"):
    """Linear system ``x' = A x + B u`` with optional output ``y = C x``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    n, m = B.shape
    Cm = None if C is None else np.asarray(C, dtype=float).reshape(m, n)

    def g0(x):
        return np.einsum("ij,...j->...i", A, x)

    def g(x):
        return np.broadcast_to(B, np.shape(x)[:-1] + (n, m))

    h = None if Cm is None else (lambda x: np.einsum("ij,...j->...i", Cm, x))
    return InputAffineSystem(
        n, m, g0, g, h=h,
        jac_g0=lambda x: np.broadcast_to(A, np.shape(x)[:-1] + (n, n)),
        jac_g=lambda x: np.zeros(np.shape(x)[:-1] + (m, n, n)),
        name=name, params={"A": A.tolist(), "B": B.tolist()})


LINEAR_PRESETS = {
    # x' = -x + u, y = x
    "scalar": {"A": [[-1.0]], "B": [[1.0]], "C": [[1.0]], "M": [[1.0]]},
    # damped oscillator, output is the velocity
    "oscillator": {"A": [[0.0, 1.0], [-1.0, -1.0]], "B": [[0.0], [1.0]], "C": [[0.0, 1.0]],
                   "M": [[1.0, 0.0], [0.0, 1.0]]},
}


@dataclass(frozen=True, eq=False)
class ModelEntry:
    system: InputAffineSystem
    storage: KrasovskiiStorage
    anchor: EquilibriumPair
    family: Optional[Any] = None
    metric: Optional[np.ndarray] = None


MODEL_IDS = ("zeta", "cuberoot") + tuple(f"linear:{k}" for k in LINEAR_PRESETS)


def get_model(model_id, params=None):
    """Look up a built-in model by registry id.

    ``params`` holds model parameters (``alpha1``..``alpha3``, ``v_star``
    for ``"zeta"``). Unknown ids or parameters raise ContractError.
    """
    params = dict(params or {})
    if model_id == "zeta":
        unknown = set(params) - {"alpha1", "alpha2", "alpha3", "v_star"}
        if unknown:
            raise ContractError(f"unknown zeta parameters: {sorted(unknown)}")
        p = ZetaParams(**params)
        return ModelEntry(zeta_system(p), zeta_storage(p), zeta_equilibrium(p),
                          zeta_family(p, v_max=max(10.0, 4.0 * p.v_star)), zeta_metric(p))
    if model_id == "cuberoot":
        if params:
            raise ContractError("cuberoot takes no parameters")
        storage = cuberoot_storage()
        return ModelEntry(storage.system, storage, storage.anchor, None, np.eye(2))
    if model_id.startswith("linear:"):
        key = model_id.split(":", 1)[1]
        if key not in LINEAR_PRESETS:
            raise ContractError(f"unknown linear preset {key!r}")
        if params:
            raise ContractError("linear presets take no parameters")
        pre = LINEAR_PRESETS[key]
        sys = linear_system(pre["A"], pre["B"], pre["C"], name=model_id)
        anchor = EquilibriumPair(np.zeros(sys.n), np.zeros(sys.m))
        M = np.asarray(pre["M"], dtype=float)
        return ModelEntry(sys, KrasovskiiStorage.canonical(sys, M, anchor), anchor, None, M)
    raise ContractError(f"unknown model id {model_id!r}")
