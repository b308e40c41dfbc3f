"""Fixed-step and adaptive integration of closed loops, trajectory
recording, convergence detection and batch execution."""

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from . import _kernels
from .errors import ConfigurationError, ContractError, IntegrationError, StiffnessError
from .system import EquilibriumPair, as_vector

__all__ = [
    "IntegratorConfig",
    "Trajectory",
    "RunSummary",
    "SimulationScenario",
    "rk4_step",
    "rk45_step",
    "simulate",
    "kernel_eligible",
    "anchor_distance",
    "detect_convergence",
    "oscillation_metric",
    "monotonicity_monitor",
    "summarize_run",
    "batch_run",
]


@dataclass(frozen=True)
class IntegratorConfig:
    method: str = "rk4"
    dt: float = 1e-3
    t_final: float = 200.0
    record_stride: int = 10
    rel_tol: float = 1e-8
    abs_tol: float = 1e-10
    dt_min: float = 1e-10
    dt_max: float = 0.1

    def __post_init__(self):
        if self.method not in ("rk4", "rk45"):
            raise ConfigurationError(f"unknown integration method {self.method!r}")
        if not (self.dt > 0 and self.t_final > 0):
            raise ConfigurationError("dt and t_final must be positive")
        if not (self.rel_tol > 0 and self.abs_tol > 0):
            raise ConfigurationError("tolerances must be positive")
        if not (0 < self.dt_min <= self.dt_max):
            raise ConfigurationError("need 0 < dt_min <= dt_max")
        if int(self.record_stride) < 1:
            raise ConfigurationError("record_stride must be at least 1")
        object.__setattr__(self, "record_stride", int(self.record_stride))


@dataclass
class Trajectory:
    """Recorded samples of a closed-loop run.

    ``monitors`` holds ``y1`` (N,), ``y2`` (N, m) and ``y3`` (N,);
    ``storage`` holds ``S_K`` and, for controlled runs, ``S1`` or ``S2``.
    """

    t: np.ndarray
    z: np.ndarray
    u_applied: np.ndarray
    monitors: dict
    storage: dict
    kind: str = ""
    n: int = 0
    m: int = 0
    backend: str = "generic"

    def __post_init__(self):
        N = len(self.t)
        channels = [self.z, self.u_applied, *self.monitors.values(), *self.storage.values()]
        if any(len(c) != N for c in channels):
            raise ContractError("trajectory channels must all have the same length")
        if N > 1 and np.any(np.diff(self.t) <= 0):
            raise ContractError("trajectory time grid must be strictly increasing")
        for c in channels:
            if not np.all(np.isfinite(c)):
                raise ContractError("trajectory contains non-finite samples")

    def __len__(self):
        return len(self.t)

    @property
    def x(self):
        return self.z[:, : self.n]

    def columns(self):
        """Ordered ``(name, 1-D array)`` pairs using the fixed CSV header names."""
        n, m = self.n, self.m
        cols = [("t", self.t)]
        cols += [(f"x{i + 1}", self.z[:, i]) for i in range(n)]
        cols += [(f"u{i + 1}", self.u_applied[:, i]) for i in range(m)]
        if self.kind == "kpbc":
            cols += [(f"uK{i + 1}", self.z[:, n + m + i]) for i in range(m)]
        elif self.kind == "spbc":
            cols += [(f"v{i + 1}", self.z[:, n + i]) for i in range(m)]
        cols.append(("y1", self.monitors["y1"]))
        y2 = np.asarray(self.monitors["y2"]).reshape(len(self.t), -1)
        cols += [(f"y2_{i + 1}", y2[:, i]) for i in range(y2.shape[1])]
        cols.append(("y3", self.monitors["y3"]))
        for key in ("S_K", "S1", "S2"):
            if key in self.storage:
                cols.append((key, self.storage[key]))
        return cols


@dataclass
class RunSummary:
    scenario_id: str = ""
    converged: bool = False
    t_converge: Optional[float] = None
    endpoint: Optional[list] = None
    distance_to_anchor: Optional[float] = None
    worst_storage_increase: Optional[float] = None
    invariant_set: dict = field(default_factory=dict)
    oscillation_count: Optional[int] = None
    backend: str = ""
    error: Optional[str] = None
    trajectory: Any = field(default=None, repr=False)

    def to_dict(self):
        return {
            "scenario_id": self.scenario_id,
            "converged": bool(self.converged),
            "t_converge": self.t_converge,
            "endpoint": self.endpoint,
            "distance_to_anchor": self.distance_to_anchor,
            "worst_storage_increase": self.worst_storage_increase,
            "invariant_set": self.invariant_set,
            "oscillation_count": self.oscillation_count,
            "backend": self.backend,
            "error": self.error,
        }


def _check_stages(stages, t):
    for k in stages:
        if not np.all(np.isfinite(k)):
            raise IntegrationError(f"non-finite vector field at t={t:.6g}", t=t)


def rk4_step(field, z, t, dt):
    """One classical Runge-Kutta step of ``z' = field(t, z)``."""
    z = np.asarray(z, dtype=float)
    k1 = np.asarray(field(t, z), dtype=float)
    k2 = np.asarray(field(t + 0.5 * dt, z + 0.5 * dt * k1), dtype=float)
    k3 = np.asarray(field(t + 0.5 * dt, z + 0.5 * dt * k2), dtype=float)
    k4 = np.asarray(field(t + dt, z + dt * k3), dtype=float)
    _check_stages((k1, k2, k3, k4), t)
    return z + (dt / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)


# Dormand-Prince 5(4) tableau
_DP_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200,
                   187 / 2100, 1 / 40])


def rk45_step(field, z, t, dt, rel_tol=1e-8, abs_tol=1e-10, safety=0.9, clamp=(0.2, 5.0)):
    """One Dormand-Prince 5(4) step.

    Returns ``(z_next, error_norm, dt_next)``. ``error_norm`` is the RMS of
    the embedded error scaled by ``abs_tol + rel_tol * max(|z|, |z_next|)``;
    the step should be accepted when it is at most 1.
    """
    z = np.asarray(z, dtype=float)
    k = []
    for c, row in zip(_DP_C, _DP_A):
        zi = z + dt * sum((a * kj for a, kj in zip(row, k)), np.zeros_like(z))
        k.append(np.asarray(field(t + c * dt, zi), dtype=float))
    _check_stages(k, t)
    K = np.stack(k)
    z5 = z + dt * (_DP_B5 @ K)
    err = dt * ((_DP_B5 - _DP_B4) @ K)
    scale = abs_tol + rel_tol * np.maximum(np.abs(z), np.abs(z5))
    err_norm = float(np.sqrt(np.mean((err / scale) ** 2)))
    factor = clamp[1] if err_norm == 0.0 else safety * err_norm ** -0.2
    return z5, err_norm, dt * min(clamp[1], max(clamp[0], factor))


def kernel_eligible(cl):
    """True when the closed loop matches a compiled Zeta kernel."""
    from .models import zeta_metric

    sys = cl.system
    if sys.name != "zeta" or cl.kind not in ("kpbc", "kpbc1", "spbc") or cl.custom_output:
        return False
    st = cl.storage
    return (st.constant_metric and np.array_equal(np.asarray(st.M), zeta_metric(sys.params))
            and sys.m == 1)


def _kernel_args(cl):
    cfg = cl.config
    if cl.kind == "kpbc":
        return _kernels.KPBC, (cfg.K1[0, 0], cfg.K2[0, 0], cfg.K3[0, 0]), cfg.nu1
    if cl.kind == "kpbc1":
        return _kernels.KPBC1, (cfg.K2[0, 0], cfg.K3[0, 0]), cfg.nu1
    return _kernels.SPBC, (cfg.K4[0, 0], cfg.K5[0, 0], cfg.K6[0, 0], cfg.K7[0, 0]), cfg.nu2


def _record(cl, t, z, backend):
    t = np.asarray(t, dtype=float)
    z = np.asarray(z, dtype=float)
    mon = cl.monitors(t, z)
    monitors = {"y1": np.asarray(mon.y1, dtype=float).reshape(len(t)),
                "y2": np.asarray(mon.y2, dtype=float).reshape(len(t), -1),
                "y3": np.asarray(mon.y3, dtype=float).reshape(len(t))}
    storage = {k: np.asarray(v, dtype=float).reshape(len(t))
               for k, v in cl.storage_values(t, z).items()}
    u = np.asarray(cl.plant_input(t, z), dtype=float).reshape(len(t), cl.m)
    return Trajectory(t, z, u, monitors, storage, cl.kind, cl.n, cl.m, backend)


def _partial(cl, t, z, backend):
    """Longest recordable prefix of a failed run (monitors may overflow near a blow-up)."""

    def attempt(k):
        try:
            with np.errstate(all="ignore"):
                return _record(cl, t[:k], z[:k], backend)
        except Exception:
            return None

    t, z = np.asarray(t), np.asarray(z)
    best = attempt(len(t)) if len(t) else None
    if best is not None or len(t) == 0:
        return best
    lo, hi = 0, len(t)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        rec = attempt(mid)
        if rec is None:
            hi = mid
        else:
            lo, best = mid, rec
    return best


def simulate(closed_loop, z0, cfg=None, backend=None):
    """Integrate a closed loop from ``z0`` and record every channel.

    Parameters
    ----------
    closed_loop : ClosedLoopSystem
    z0 : array_like
        Composite initial state.
    cfg : IntegratorConfig, optional
        Defaults to RK4 with ``dt = 1e-3`` up to ``t = 200``. For RK4 the
        step is shrunk, if needed, so that the grid ends exactly at
        ``t_final``.
    backend : {None, "compiled", "python", "generic"}
        ``None`` picks the active Zeta kernel when the closed loop matches
        one, otherwise the generic numpy integrator. ``"generic"`` forces
        the latter.

    Raises
    ------
    IntegrationError
        With the partial trajectory attached as ``partial``.
    """
    cfg = IntegratorConfig() if cfg is None else cfg
    cl = closed_loop
    z0 = as_vector(z0, cl.dim, "z0").astype(float)
    if z0.ndim != 1:
        raise ContractError("simulate takes one initial state")

    if cfg.method == "rk4":
        n_steps = max(1, math.ceil(cfg.t_final / cfg.dt - 1e-9))
        dt = cfg.t_final / n_steps
        use_kernel = backend != "generic" and kernel_eligible(cl)
        if backend in ("compiled", "python") and not use_kernel:
            raise ContractError("no Zeta kernel matches this closed loop")
        if use_kernel:
            kind, gains, nu = _kernel_args(cl)
            kernel = _kernels.get_kernel(backend)
            name = backend or _kernels.BACKEND
            nu_scalar = None if nu is None else (lambda t: float(np.ravel(nu(t))[0]))
            t, z, _, fail = kernel(kind, *_params(cl), gains, float(cl.config.u_star[0]), z0,
                                   0.0, dt, n_steps, cfg.record_stride, nu_scalar)
            if fail >= 0:
                tf = (fail + 1) * dt
                raise IntegrationError(f"non-finite state at t={tf:.6g}", t=tf,
                                       partial=_partial(cl, t, z, name))
            return _record(cl, t, z, name)
        ts, zs = [0.0], [z0]
        z = z0
        for step in range(n_steps):
            t = step * dt
            try:
                z = rk4_step(cl.field, z, t, dt)
            except IntegrationError as exc:
                exc.partial = _partial(cl, np.array(ts), np.array(zs), "generic")
                raise
            if (step + 1) % cfg.record_stride == 0 or step + 1 == n_steps:
                ts.append((step + 1) * dt)
                zs.append(z)
        return _record(cl, np.array(ts), np.array(zs), "generic")

    if backend not in (None, "generic"):
        raise ContractError("compiled kernels implement RK4 only")
    t, z, dt = 0.0, z0, min(cfg.dt, cfg.dt_max)
    ts, zs = [0.0], [z0]
    accepted = 0
    while t < cfg.t_final * (1 - 1e-12):
        step = min(dt, cfg.t_final - t)
        try:
            z_new, err, dt_next = rk45_step(cl.field, z, t, step, cfg.rel_tol, cfg.abs_tol)
        except IntegrationError as exc:
            exc.partial = _partial(cl, np.array(ts), np.array(zs), "generic")
            raise
        if err <= 1.0:
            t, z = t + step, z_new
            accepted += 1
            if accepted % cfg.record_stride == 0 or t >= cfg.t_final * (1 - 1e-12):
                ts.append(t)
                zs.append(z)
        dt = min(dt_next, cfg.dt_max)
        if dt < cfg.dt_min:
            raise StiffnessError(f"step size underflow at t={t:.6g}", t=t,
                                 partial=_partial(cl, np.array(ts), np.array(zs), "generic"))
    return _record(cl, np.array(ts), np.array(zs), "generic")


def _params(cl):
    p = cl.system.params
    return p.alpha1, p.alpha2, p.alpha3


def anchor_distance(anchor, x):
    """Distance from states ``x`` to an EquilibriumPair or an equilibrium family."""
    if isinstance(anchor, EquilibriumPair):
        return anchor.distance(x)
    return np.asarray(anchor.distance(x), dtype=float)


def _state_part(traj):
    return traj.z[:, : traj.n] if traj.n else traj.z


def detect_convergence(traj, anchor, eps=1e-3, window=10.0, distance=None):
    """Convergence test on the state distance to ``anchor``.

    Converged when the distance stays below ``eps`` from some time
    ``t_enter`` to the end of the run and ``t_final - t_enter >= window``;
    ``t_converge`` is then ``t_enter + window``. ``distance`` may carry
    precomputed per-sample distances.
    """
    d = anchor_distance(anchor, _state_part(traj)) if distance is None else distance
    t = traj.t
    outside = np.flatnonzero(~(d < eps))
    summary = RunSummary(endpoint=traj.z[-1].tolist(), distance_to_anchor=float(d[-1]),
                         backend=traj.backend)
    if outside.size == 0:
        t_enter = t[0]
    elif outside[-1] == len(t) - 1:
        return summary
    else:
        t_enter = t[outside[-1] + 1]
    if t[-1] - t_enter >= window - 1e-9:
        summary.converged = True
        summary.t_converge = float(t_enter + window)
    return summary


def oscillation_metric(traj, anchor, floor=1e-6, distance=None):
    """Number of sign changes of ``d/dt |x - x*|``.

    Samples whose distance is at most ``floor`` are ignored, so round-off
    wiggles after convergence are not counted.
    """
    d = anchor_distance(anchor, _state_part(traj)) if distance is None else distance
    if len(d) < 3:
        return 0
    s = np.sign(np.gradient(d, traj.t))
    keep = (d > floor) & (s != 0)
    s = s[keep]
    return int(np.sum(s[1:] != s[:-1]))


def monotonicity_monitor(traj, channel=None, slack=None):
    """Largest increase of a storage channel between consecutive samples.

    ``channel`` defaults to ``S1`` or ``S2``, whichever is present.
    Returns 0.0 for non-increasing channels. With ``slack`` given, returns
    ``(worst, worst <= slack)`` instead.
    """
    if slack is not None:
        worst = monotonicity_monitor(traj, channel)
        return worst, bool(worst <= slack)
    if channel is None:
        channel = "S1" if "S1" in traj.storage else ("S2" if "S2" in traj.storage else "S_K")
    S = np.asarray(traj.storage[channel], dtype=float)
    if S.size < 2:
        return 0.0
    return float(max(0.0, np.max(np.diff(S))))


def summarize_run(cl, traj, anchor=None, eps=1e-3, window=10.0, tag_tol=1e-6,
                  scenario_id=""):
    """Run summary with convergence, storage monotonicity, LaSalle tags and
    the oscillation count."""
    anchor = cl.anchor if anchor is None else anchor
    d = anchor_distance(anchor, _state_part(traj))
    summary = detect_convergence(traj, anchor, eps, window, distance=d)
    summary.scenario_id = scenario_id
    if cl.kind != "open":
        summary.worst_storage_increase = monotonicity_monitor(traj)
    tags = cl.invariant_set_tags(traj.t[-1], traj.z[-1], tag_tol)
    summary.invariant_set = {k: bool(v) for k, v in tags.items()}
    summary.oscillation_count = oscillation_metric(traj, anchor, distance=d)
    return summary


@dataclass(eq=False)
class SimulationScenario:
    """A self-contained run for :func:`batch_run`."""

    id: str
    closed_loop: Any
    z0: Any
    config: IntegratorConfig = field(default_factory=IntegratorConfig)
    anchor: Any = None
    eps: float = 1e-3
    window: float = 10.0
    backend: Optional[str] = None
    keep_trajectory: bool = False

    def run(self):
        traj = simulate(self.closed_loop, self.z0, self.config, self.backend)
        summary = summarize_run(self.closed_loop, traj, self.anchor, self.eps, self.window,
                                scenario_id=self.id)
        if self.keep_trajectory:
            summary.trajectory = traj
        return summary


def _default_workers(n):
    env = os.environ.get("KPBC_THREADS")
    cap = int(env) if env and env.isdigit() and int(env) > 0 else (os.cpu_count() or 1)
    return max(1, min(cap, n))


def batch_run(scenarios, workers=None):
    """Run scenarios in a thread pool; results follow input order.

    Each scenario needs an ``id`` and a ``run()`` returning a RunSummary.
    A failing scenario yields a summary with ``error`` set instead of
    aborting the batch. ``workers`` defaults to ``KPBC_THREADS`` or the CPU
    count.
    """
    scenarios = list(scenarios)
    if not scenarios:
        return []

    def one(sc):
        try:
            return sc.run()
        except Exception as exc:
            return RunSummary(scenario_id=str(sc.id), error=f"{type(exc).__name__}: {exc}")

    workers = _default_workers(len(scenarios)) if workers is None else max(1, int(workers))
    if workers == 1:
        return [one(sc) for sc in scenarios]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, scenarios))
