"""Krasovskii and shifted passivity-based dynamic controllers, their storage
functions, monitor outputs, transfer-function data and closed-loop assembly."""

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ConfigurationError, ContractError
from .passivity import KrasovskiiStorage, krasovskii_output, shifted_output
from .system import EquilibriumPair, InputAffineSystem, as_vector, evaluate_f

__all__ = [
    "KrasovskiiPBCConfig",
    "KrasovskiiPBCState",
    "FirstOrderKPBCConfig",
    "ShiftedPBCConfig",
    "ShiftedPBCState",
    "OpenLoopInput",
    "MonitorOutputs",
    "TransferCoefficients",
    "ClosedLoopSystem",
    "kpbc_rhs",
    "kpbc_first_order",
    "spbc_rhs",
    "eval_S1",
    "eval_S2",
    "monitor_outputs",
    "transfer_coefficients",
    "assemble_closed_loop",
    "sine_signal",
]

SYMMETRY_TOL = 1e-12
PSD_TOL = 1e-12


def _gain(K, m, name, definite):
    K = np.asarray(K, dtype=float)
    if K.ndim == 0:
        K = K * np.eye(m)
    if K.shape != (m, m):
        raise ConfigurationError(f"{name} must be {m}x{m}, got shape {K.shape}")
    asym = np.max(np.abs(K - K.T)) if m > 1 else 0.0
    if asym > SYMMETRY_TOL:
        warnings.warn(f"{name} is not symmetric (max asymmetry {asym:.3g}); symmetrizing",
                      stacklevel=3)
    K = 0.5 * (K + K.T)
    if definite:
        try:
            cho_factor(K)
        except np.linalg.LinAlgError:
            raise ConfigurationError(f"{name} must be symmetric positive definite") from None
        if np.min(np.linalg.eigvalsh(K)) <= 0:
            raise ConfigurationError(f"{name} must be symmetric positive definite")
    elif np.min(np.linalg.eigvalsh(K)) < -PSD_TOL:
        raise ConfigurationError(f"{name} must be positive semidefinite")
    K.setflags(write=False)
    return K


def _signal(nu, m):
    if nu is None:
        return None
    if not callable(nu):
        raise ConfigurationError("exogenous signals must be callables of time")
    return nu


def _nu(sig, t, m):
    if sig is None:
        return np.zeros(m)
    return as_vector(sig(t), m, "nu")


def sine_signal(amplitude, omega=1.0, phase=0.0, offset=0.0):
    """``t -> offset + amplitude * sin(omega t + phase)`` as a length-m vector."""
    amplitude = np.atleast_1d(np.asarray(amplitude, dtype=float))
    offset = np.broadcast_to(np.asarray(offset, dtype=float), amplitude.shape)

    def nu(t):
        return offset + amplitude * np.sin(omega * t + phase)

    nu.spec = {"type": "sine", "amplitude": amplitude.tolist(), "omega": float(omega),
               "phase": float(phase), "offset": offset.tolist()}
    return nu


@dataclass(frozen=True, eq=False)
class KrasovskiiPBCConfig:
    """Gains of the second-order Krasovskii controller.

    ``K1`` must be symmetric positive definite, ``K2`` and ``K3`` symmetric
    positive semidefinite; scalars are accepted as multiples of identity.
    """

    K1: np.ndarray
    K2: np.ndarray
    K3: np.ndarray
    u_star: np.ndarray
    nu1: Optional[Callable] = None
    _chol: tuple = field(init=False, repr=False)

    def __post_init__(self):
        u_star = np.atleast_1d(np.asarray(self.u_star, dtype=float))
        m = u_star.size
        object.__setattr__(self, "u_star", u_star)
        object.__setattr__(self, "K1", _gain(self.K1, m, "K1", True))
        object.__setattr__(self, "K2", _gain(self.K2, m, "K2", False))
        object.__setattr__(self, "K3", _gain(self.K3, m, "K3", False))
        object.__setattr__(self, "nu1", _signal(self.nu1, m))
        object.__setattr__(self, "_chol", cho_factor(self.K1))

    @property
    def m(self):
        return self.u_star.size


@dataclass(frozen=True)
class KrasovskiiPBCState:
    u: np.ndarray
    u_K: np.ndarray

    def __post_init__(self):
        u = np.atleast_1d(np.asarray(self.u, dtype=float))
        u_K = np.atleast_1d(np.asarray(self.u_K, dtype=float))
        if u.shape != u_K.shape:
            raise ContractError("u and u_K must have the same dimension")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "u_K", u_K)


@dataclass(frozen=True, eq=False)
class FirstOrderKPBCConfig:
    """Gains of the first-order Krasovskii controller (``K2`` SPD, ``K3`` PSD)."""

    K2: np.ndarray
    K3: np.ndarray
    u_star: np.ndarray
    nu1: Optional[Callable] = None
    _chol: tuple = field(init=False, repr=False)

    def __post_init__(self):
        u_star = np.atleast_1d(np.asarray(self.u_star, dtype=float))
        m = u_star.size
        object.__setattr__(self, "u_star", u_star)
        object.__setattr__(self, "K2", _gain(self.K2, m, "K2", True))
        object.__setattr__(self, "K3", _gain(self.K3, m, "K3", False))
        object.__setattr__(self, "nu1", _signal(self.nu1, m))
        object.__setattr__(self, "_chol", cho_factor(self.K2))

    @property
    def m(self):
        return self.u_star.size


@dataclass(frozen=True, eq=False)
class ShiftedPBCConfig:
    """Gains of the shifted passivity controller (``K4`` SPD, ``K5..K7`` PSD)."""

    K4: np.ndarray
    K5: np.ndarray
    K6: np.ndarray
    K7: np.ndarray
    u_star: np.ndarray
    nu2: Optional[Callable] = None
    _chol: tuple = field(init=False, repr=False)

    def __post_init__(self):
        u_star = np.atleast_1d(np.asarray(self.u_star, dtype=float))
        m = u_star.size
        object.__setattr__(self, "u_star", u_star)
        object.__setattr__(self, "K4", _gain(self.K4, m, "K4", True))
        for name in ("K5", "K6", "K7"):
            object.__setattr__(self, name, _gain(getattr(self, name), m, name, False))
        object.__setattr__(self, "nu2", _signal(self.nu2, m))
        object.__setattr__(self, "_chol", cho_factor(self.K4))

    @property
    def m(self):
        return self.u_star.size


@dataclass(frozen=True)
class ShiftedPBCState:
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "v", np.atleast_1d(np.asarray(self.v, dtype=float)))


@dataclass(frozen=True, eq=False)
class OpenLoopInput:
    """Prescribed plant input ``u(t)``; ``u_dot`` defaults to central differences."""

    u: Callable
    u_dot: Optional[Callable] = None
    spec: Optional[dict] = None

    def rate(self, t):
        if self.u_dot is not None:
            return np.asarray(self.u_dot(t), dtype=float)
        h = 1e-6 * (1.0 + abs(t))
        return (np.asarray(self.u(t + h)) - np.asarray(self.u(t - h))) / (2 * h)


@dataclass(frozen=True)
class MonitorOutputs:
    y1: float
    y2: np.ndarray
    y3: float


def kpbc_rhs(cfg, state, y_K, t=0.0):
    """Controller dynamics ``u' = u_K``, ``K1 u_K' = nu1 - K2 u_K - K3 (u - u*) - y_K``."""
    m = cfg.m
    u = as_vector(state.u, m, "u")
    u_K = as_vector(state.u_K, m, "u_K")
    y_K = as_vector(y_K, m, "y_K")
    rhs = _nu(cfg.nu1, t, m) - u_K @ cfg.K2.T - (u - cfg.u_star) @ cfg.K3.T - y_K
    return u_K.copy(), cho_solve(cfg._chol, rhs.T).T


def kpbc_first_order(cfg, u, y_K, t=0.0):
    """Static law ``u_K = K2^{-1} (nu1 - K3 (u - u*) - y_K)`` feeding ``u' = u_K``."""
    m = cfg.m
    u = as_vector(u, m, "u")
    y_K = as_vector(y_K, m, "y_K")
    rhs = _nu(cfg.nu1, t, m) - (u - cfg.u_star) @ cfg.K3.T - y_K
    return cho_solve(cfg._chol, rhs.T).T


def spbc_rhs(cfg, v, y, t=0.0):
    """Shifted controller: returns ``(u, v')`` with ``u = u* - K5 y + K6 v`` and
    ``K4 v' = nu2 - K6 y - K7 v``."""
    m = cfg.m
    v = as_vector(v, m, "v")
    y = as_vector(y, m, "y")
    u = cfg.u_star - y @ cfg.K5.T + v @ cfg.K6.T
    rhs = _nu(cfg.nu2, t, m) - y @ cfg.K6.T - v @ cfg.K7.T
    return u, cho_solve(cfg._chol, rhs.T).T


def _wquad(K, a):
    return 0.5 * np.einsum("...i,ij,...j->...", a, K, a)


def eval_S1(storage, cfg, x, u, u_K):
    """``S_K(x,u) + |u - u*|^2_{K3} / 2 + |u_K|^2_{K1} / 2``."""
    u = as_vector(u, cfg.m, "u")
    out = storage(x, u) + _wquad(cfg.K3, u - cfg.u_star)
    if u_K is not None and hasattr(cfg, "K1"):
        out = out + _wquad(cfg.K1, as_vector(u_K, cfg.m, "u_K"))
    return out


def eval_S2(storage, cfg, x, v):
    """``S_K(x, u*) + |v|^2_{K4} / 2``."""
    x = np.asarray(x, dtype=float)
    u_star = np.broadcast_to(cfg.u_star, x.shape[:-1] + (cfg.m,))
    return storage(x, u_star) + _wquad(cfg.K4, as_vector(v, cfg.m, "v"))


def monitor_outputs(storage, sys, anchor, x, u, K3=None, h_K=None):
    """Monitor outputs ``y1 = dS_K/dx f``, ``y2 = K3 (u - u*) + y_K``,
    ``y3 = dS_K(x,u*)/dx f(x,u*)``.

    ``K3`` defaults to zero; ``h_K`` defaults to the storage's Krasovskii
    output. Works on batches; returns :class:`MonitorOutputs` of arrays.
    """
    x = as_vector(x, sys.n, "x")
    u = as_vector(u, sys.m, "u")
    anchor = storage.anchor if anchor is None else anchor
    h_K = krasovskii_output(sys, storage) if h_K is None else h_K
    u_star = np.broadcast_to(anchor.u_star, u.shape)
    y1 = np.sum(storage.grad_x(x, u) * evaluate_f(sys, x, u), axis=-1)
    K3 = np.zeros((sys.m, sys.m)) if K3 is None else np.asarray(K3, dtype=float)
    y2 = (u - u_star) @ K3.T + np.asarray(h_K(x, u), dtype=float)
    y3 = np.sum(storage.grad_x(x, u_star) * evaluate_f(sys, x, u_star), axis=-1)
    return MonitorOutputs(y1, y2, y3)


@dataclass(frozen=True)
class TransferCoefficients:
    """Polynomial data of a controller viewed as output feedback.

    For ``kpbc``: ``U(s) = (K1 s^2 + K2 s + K3)^{-1} (V1(s) - Y_K(s))`` and
    ``denominator = (K1, K2, K3)``. For ``spbc``:
    ``U(s) = -K5 Y + K6 (K4 s + K7)^{-1} (V2 - K6 Y)`` and
    ``realization = (-K5, K6, K4, K7)``.
    """

    kind: str
    denominator: Optional[tuple] = None
    realization: Optional[tuple] = None
    singular_at_one: bool = False
    structure: str = ""

    def response(self, s):
        """Transfer matrix from the measured output to ``u - u*`` at ``s``."""
        if self.kind == "kpbc":
            K1, K2, K3 = self.denominator
            return -np.linalg.inv(K1 * s * s + K2 * s + K3)
        D, K6, K4, K7 = self.realization
        return D - K6 @ np.linalg.inv(K4 * s + K7) @ K6

    def exogenous_response(self, s):
        """Transfer matrix from the exogenous signal to ``u - u*`` at ``s``."""
        if self.kind == "kpbc":
            K1, K2, K3 = self.denominator
            return np.linalg.inv(K1 * s * s + K2 * s + K3)
        _, K6, K4, K7 = self.realization
        return K6 @ np.linalg.inv(K4 * s + K7)


def transfer_coefficients(cfg):
    """Transfer-function data for a Krasovskii or shifted controller config."""
    if isinstance(cfg, KrasovskiiPBCConfig):
        singular = abs(np.linalg.det(cfg.K1 + cfg.K2 + cfg.K3)) < 1e-12
        return TransferCoefficients("kpbc", denominator=(cfg.K1, cfg.K2, cfg.K3),
                                    singular_at_one=bool(singular), structure="second-order")
    if isinstance(cfg, ShiftedPBCConfig):
        singular = abs(np.linalg.det(cfg.K4 + cfg.K7)) < 1e-12
        if not np.any(cfg.K6):
            structure = "static"
        elif not np.any(cfg.K5):
            structure = "low-pass"
        elif not np.any(cfg.K7):
            structure = "PI"
        else:
            structure = "proper"
        return TransferCoefficients("spbc", realization=(-cfg.K5, cfg.K6, cfg.K4, cfg.K7),
                                    singular_at_one=bool(singular), structure=structure)
    raise ContractError("transfer_coefficients needs a KrasovskiiPBCConfig or ShiftedPBCConfig")


@dataclass(frozen=True, eq=False)
class ClosedLoopSystem:
    """Composite vector field of a plant and one of the controllers.

    Composite state layout: ``kpbc`` (x, u, u_K); ``kpbc1`` (x, u);
    ``spbc`` (x, v); ``open`` (x) with the input fixed by ``config``.
    ``anchor_state`` is the composite equilibrium for zero exogenous input.
    All methods accept batches of composite states except :meth:`field`,
    whose exogenous signal is evaluated at one time instant.
    """

    kind: str
    system: InputAffineSystem
    storage: KrasovskiiStorage
    config: object
    output_map: Optional[Callable] = None
    custom_output: bool = False

    @property
    def n(self):
        return self.system.n

    @property
    def m(self):
        return self.system.m

    @property
    def dim(self):
        return self.n + {"kpbc": 2, "kpbc1": 1, "spbc": 1, "open": 0}[self.kind] * self.m

    @property
    def anchor(self):
        return self.storage.anchor

    @property
    def u_star(self):
        if self.kind == "open":
            return self.anchor.u_star
        return self.config.u_star

    @property
    def anchor_state(self):
        x, m = self.anchor.x_star, self.m
        if self.kind == "kpbc":
            return np.concatenate([x, self.u_star, np.zeros(m)])
        if self.kind == "kpbc1":
            return np.concatenate([x, self.u_star])
        if self.kind == "spbc":
            return np.concatenate([x, np.zeros(m)])
        return x.copy()

    def split(self, z):
        z = as_vector(z, self.dim, "z")
        n, m = self.n, self.m
        parts = {"x": z[..., :n]}
        if self.kind == "kpbc":
            parts["u"], parts["u_K"] = z[..., n:n + m], z[..., n + m:]
        elif self.kind == "kpbc1":
            parts["u"] = z[..., n:]
        elif self.kind == "spbc":
            parts["v"] = z[..., n:]
        return parts

    def h_K(self, x, u):
        return krasovskii_output(self.system, self.storage)(x, u)

    def shifted_y(self, x):
        return np.asarray(self.output_map(x), dtype=float)

    def exogenous(self, t):
        sig = {"kpbc": "nu1", "kpbc1": "nu1", "spbc": "nu2"}.get(self.kind)
        return None if sig is None else getattr(self.config, sig)

    def nu_values(self, t):
        """Exogenous signal samples at the times ``t`` (shape (N, m))."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        sig = self.exogenous(t)
        if sig is None:
            return np.zeros(t.shape + (self.m,))
        return np.stack([as_vector(sig(ti), self.m, "nu") for ti in t])

    def plant_input(self, t, z):
        """Input applied to the plant; ``t`` is a scalar or matches the batch."""
        p = self.split(z)
        if self.kind in ("kpbc", "kpbc1"):
            return p["u"]
        if self.kind == "spbc":
            y = self.shifted_y(p["x"])
            return self.config.u_star - y @ self.config.K5.T + p["v"] @ self.config.K6.T
        t = np.atleast_1d(np.asarray(t, dtype=float))
        vals = np.stack([as_vector(self.config.u(ti), self.m, "u") for ti in t])
        return vals.reshape(np.shape(p["x"])[:-1] + (self.m,))

    def u_K(self, t, z):
        """Controller output ``u'`` (kpbc, kpbc1) at a batch of states."""
        p = self.split(z)
        if self.kind == "kpbc":
            return p["u_K"]
        if self.kind == "kpbc1":
            cfg = self.config
            nu = self._nu_batch(t, p["x"])
            rhs = nu - (p["u"] - cfg.u_star) @ cfg.K3.T - self.h_K(p["x"], p["u"])
            return cho_solve(cfg._chol, rhs.reshape(-1, self.m).T).T.reshape(rhs.shape)
        raise ContractError(f"u_K is not defined for kind {self.kind!r}")

    def _nu_batch(self, t, x):
        shape = np.shape(x)[:-1] + (self.m,)
        if self.exogenous(t) is None:
            return np.zeros(shape)
        return self.nu_values(t).reshape(shape)

    def field(self, t, z):
        """Composite vector field at time ``t``."""
        p = self.split(z)
        x = p["x"]
        if self.kind == "kpbc":
            u, u_K = p["u"], p["u_K"]
            _, du_K = kpbc_rhs(self.config, KrasovskiiPBCState(u, u_K), self.h_K(x, u), t)
            return np.concatenate([evaluate_f(self.system, x, u), u_K, du_K])
        if self.kind == "kpbc1":
            u = p["u"]
            u_K = kpbc_first_order(self.config, u, self.h_K(x, u), t)
            return np.concatenate([evaluate_f(self.system, x, u), u_K])
        if self.kind == "spbc":
            u, dv = spbc_rhs(self.config, p["v"], self.shifted_y(x), t)
            return np.concatenate([evaluate_f(self.system, x, u), dv])
        return evaluate_f(self.system, x, self.plant_input(t, z))

    def storage_values(self, t, z):
        """``{"S_K": ..., "S1"|"S2": ...}`` evaluated on a batch of states."""
        p = self.split(z)
        x = p["x"]
        u = self.plant_input(t, z)
        out = {"S_K": self.storage(x, u)}
        if self.kind == "kpbc":
            out["S1"] = eval_S1(self.storage, self.config, x, p["u"], p["u_K"])
        elif self.kind == "kpbc1":
            out["S1"] = eval_S1(self.storage, self.config, x, p["u"], None)
        elif self.kind == "spbc":
            out["S2"] = eval_S2(self.storage, self.config, x, p["v"])
        return out

    def monitors(self, t, z):
        """Monitor outputs on a batch. ``y2`` carries ``K3 (u - u*) + y_K`` for
        Krasovskii controllers and the shifted output ``y`` for ``spbc``."""
        p = self.split(z)
        x = p["x"]
        u = self.plant_input(t, z)
        K3 = getattr(self.config, "K3", None)
        anchor = EquilibriumPair(self.anchor.x_star, self.u_star)
        mon = monitor_outputs(self.storage, self.system, anchor, x, u, K3=K3, h_K=self.h_K)
        if self.kind == "spbc":
            return MonitorOutputs(mon.y1, self.shifted_y(x), mon.y3)
        return mon

    def storage_rate(self, t, z):
        """Storage derivative from the closed-form dissipation identity."""
        p = self.split(z)
        x = p["x"]
        u = self.plant_input(t, z)
        mon = self.monitors(t, z)
        if self.kind in ("kpbc", "kpbc1"):
            u_K = self.u_K(t, z)
            nu = self._nu_batch(t, x)
            return mon.y1 + np.sum(u_K * (nu - u_K @ self.config.K2.T), axis=-1)
        if self.kind == "spbc":
            cfg, v, y = self.config, p["v"], mon.y2
            nu = self._nu_batch(t, x)
            return (np.sum(v * nu, axis=-1) + mon.y3
                    - np.einsum("...i,ij,...j->...", v, cfg.K7, v)
                    - np.einsum("...i,ij,...j->...", y, cfg.K5, y))
        rate = np.asarray(self.config.rate(t), dtype=float).reshape(-1)
        return mon.y1 + np.sum(self.storage.grad_u(x, u) * rate, axis=-1)

    def storage_gradient(self, z):
        """Gradient of S1 / S2 with respect to the composite state."""
        p = self.split(z)
        x = p["x"]
        st, cfg = self.storage, self.config
        if self.kind in ("kpbc", "kpbc1"):
            u = p["u"]
            parts = [st.grad_x(x, u), st.grad_u(x, u) + (u - cfg.u_star) @ cfg.K3]
            if self.kind == "kpbc":
                parts.append(p["u_K"] @ cfg.K1)
            return np.concatenate(parts, axis=-1)
        if self.kind == "spbc":
            us = np.broadcast_to(cfg.u_star, np.shape(x)[:-1] + (self.m,))
            return np.concatenate([st.grad_x(x, us), p["v"] @ cfg.K4], axis=-1)
        raise ContractError("open-loop runs have no composite storage")

    def invariant_set_tags(self, t, z, tol=1e-6):
        """Empirical membership tags for the LaSalle set at a single state."""
        mon = self.monitors(t, z)
        p = self.split(z)
        y1 = float(np.abs(mon.y1))
        if self.kind == "kpbc":
            k2 = float(np.linalg.norm(p["u_K"] @ self.config.K2.T))
            return {"y1": y1 <= tol, "K2_uK": k2 <= tol, "in_set": y1 <= tol and k2 <= tol}
        if self.kind == "kpbc1":
            y2 = float(np.linalg.norm(mon.y2))
            return {"y1": y1 <= tol, "y2": y2 <= tol, "in_set": y1 <= tol and y2 <= tol}
        if self.kind == "spbc":
            cfg = self.config
            k5 = float(np.linalg.norm(mon.y2 @ cfg.K5.T))
            y3 = float(np.abs(mon.y3))
            k7 = float(np.linalg.norm(p["v"] @ cfg.K7.T))
            return {"K5_y": k5 <= tol, "y3": y3 <= tol, "K7_v": k7 <= tol,
                    "in_set": k5 <= tol and y3 <= tol and k7 <= tol}
        return {"y1": y1 <= tol, "in_set": y1 <= tol}


def assemble_closed_loop(sys, storage, config, kind, output_map=None):
    """Build the composite vector field for ``kind`` in
    ``{"kpbc", "kpbc1", "spbc", "open"}``.

    For ``spbc`` the plant output defaults to :func:`shifted_output` of the
    storage; ``open`` expects an :class:`OpenLoopInput`.
    """
    expected = {"kpbc": KrasovskiiPBCConfig, "kpbc1": FirstOrderKPBCConfig,
                "spbc": ShiftedPBCConfig, "open": OpenLoopInput}
    if kind not in expected:
        raise ContractError(f"unknown closed-loop kind {kind!r}")
    if not isinstance(config, expected[kind]):
        raise ContractError(f"{kind} needs a {expected[kind].__name__}")
    if storage.system is not sys and (storage.system.n, storage.system.m) != (sys.n, sys.m):
        raise ContractError("storage was built for a different system")
    if kind != "open" and config.m != sys.m:
        raise ContractError(f"controller has {config.m} channels, plant has {sys.m}")
    custom = output_map is not None
    if kind == "spbc" and output_map is None:
        output_map = shifted_output(sys, storage, EquilibriumPair(storage.anchor.x_star,
                                                                 config.u_star))
    return ClosedLoopSystem(kind, sys, storage, config, output_map, custom)
