"""Storage functions, output-map constructions and sampled verification of
passivity certificates.

All verifiers share one sampling engine: points are drawn from a
:class:`SampleBox` in fixed-size chunks, each chunk seeded from
``(seed, chunk_index)``, so a report depends only on the box and its seed and
never on how many worker threads evaluated it.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np

from .errors import ContractError
from .system import (EquilibriumPair, InputAffineSystem, as_vector, evaluate_F,
                     evaluate_f, numerical_jacobian)

__all__ = [
    "KrasovskiiStorage",
    "DifferentialStorage",
    "ShiftedStorage",
    "PassivityReport",
    "SampleBox",
    "krasovskii_output",
    "verify_krasovskii",
    "krasovskii_from_differential",
    "verify_differential",
    "shifted_output",
    "shifted_storage",
    "verify_shifted",
    "verify_passivity",
    "incremental_output",
    "incremental_shifted_output",
    "check_exactness",
    "verify_incremental",
    "dissipation_check",
    "verify_positivity",
]

DEFAULT_TOL = 1e-9
EQUALITY_TOL = 1e-9
CHUNK = 8192
MAX_WITNESSES = 10


def _metric(M, x, n):
    if callable(M):
        out = np.asarray(M(x), dtype=float)
    else:
        out = np.broadcast_to(np.asarray(M, dtype=float), np.shape(x)[:-1] + (n, n))
    if out.shape[-2:] != (n, n):
        raise ContractError(f"metric must be {n}x{n}, got {out.shape[-2:]}")
    return out


def _metric_derivative(M, jac_M, x, n):
    """dM/dx_k stacked on axis -3, shape (..., n, n, n) indexed [k, i, j]."""
    if not callable(M):
        return None
    if jac_M is not None:
        return np.asarray(jac_M(x), dtype=float)
    flat = numerical_jacobian(lambda xx: _metric(M, xx, n).reshape(xx.shape[:-1] + (n * n,)), x)
    return np.moveaxis(flat.reshape(x.shape[:-1] + (n, n, n)), -1, -3)


def _quad(a, M, b):
    return np.einsum("...i,...ij,...j->...", a, M, b)


@dataclass(frozen=True, eq=False)
class KrasovskiiStorage:
    """Storage ``S_K(x, u)`` for Krasovskii passivity at ``anchor``.

    Build with :meth:`canonical` for ``S_K = f^T M(x) f / 2`` or with
    :meth:`general` for an arbitrary function with optional gradients.
    ``M`` may be a constant matrix or a callable ``x -> (..., n, n)``.
    """

    system: InputAffineSystem
    anchor: EquilibriumPair
    kind: str = "canonical"
    M: Any = None
    jac_M: Optional[Callable] = None
    value_fn: Optional[Callable] = None
    grad_x_fn: Optional[Callable] = None
    grad_u_fn: Optional[Callable] = None

    def __post_init__(self):
        if self.kind not in ("canonical", "general"):
            raise ContractError(f"unknown storage kind {self.kind!r}")
        if self.kind == "canonical" and self.M is None:
            raise ContractError("canonical storage needs a metric M")
        if self.kind == "general" and self.value_fn is None:
            raise ContractError("general storage needs a value function")

    @classmethod
    def canonical(cls, system, M, anchor, jac_M=None):
        if not callable(M):
            M = np.array(M, dtype=float)
        return cls(system, anchor, "canonical", M=M, jac_M=jac_M)

    @classmethod
    def general(cls, system, value, anchor, grad_x=None, grad_u=None):
        return cls(system, anchor, "general", value_fn=value, grad_x_fn=grad_x, grad_u_fn=grad_u)

    @property
    def constant_metric(self):
        return self.kind == "canonical" and not callable(self.M)

    def metric(self, x):
        return _metric(self.M, as_vector(x, self.system.n, "x"), self.system.n)

    def __call__(self, x, u):
        sys = self.system
        if self.kind == "canonical":
            f = evaluate_f(sys, x, u)
            return 0.5 * _quad(f, self.metric(x), f)
        return np.asarray(self.value_fn(as_vector(x, sys.n, "x"), as_vector(u, sys.m, "u")),
                          dtype=float)

    def grad_x(self, x, u):
        """Row gradient dS_K/dx, shape (..., n)."""
        sys = self.system
        x = as_vector(x, sys.n, "x")
        u = as_vector(u, sys.m, "u")
        if self.kind == "canonical":
            f = evaluate_f(sys, x, u)
            Mx = self.metric(x)
            out = np.einsum("...i,...ij,...jk->...k", f, Mx, evaluate_F(sys, x, u))
            dM = _metric_derivative(self.M, self.jac_M, x, sys.n)
            if dM is not None:
                out = out + 0.5 * np.einsum("...i,...kij,...j->...k", f, dM, f)
            return out
        if self.grad_x_fn is not None:
            return np.asarray(self.grad_x_fn(x, u), dtype=float)
        ub = np.broadcast_to(u, x.shape[:-1] + (sys.m,))
        return numerical_jacobian(lambda xx: np.asarray(self(xx, ub))[..., None], x)[..., 0, :]

    def grad_u(self, x, u):
        """Row gradient dS_K/du, shape (..., m)."""
        sys = self.system
        x = as_vector(x, sys.n, "x")
        u = as_vector(u, sys.m, "u")
        if self.kind == "canonical":
            fM = np.einsum("...i,...ij->...j", evaluate_f(sys, x, u), self.metric(x))
            return np.einsum("...j,...jk->...k", fM, sys.input_matrix(x))
        if self.grad_u_fn is not None:
            return np.asarray(self.grad_u_fn(x, u), dtype=float)
        xb = np.broadcast_to(x, u.shape[:-1] + (sys.n,))
        return numerical_jacobian(lambda uu: np.asarray(self(xb, uu))[..., None], u)[..., 0, :]


@dataclass(frozen=True, eq=False)
class DifferentialStorage:
    """Quadratic differential storage ``S_D(x, dx) = dx^T M(x) dx / 2``."""

    M: Any
    h_d: Optional[Callable] = None
    jac_M: Optional[Callable] = None

    def metric(self, x):
        x = np.asarray(x, dtype=float)
        return _metric(self.M, x, x.shape[-1])

    def __call__(self, x, dx):
        return 0.5 * _quad(dx, self.metric(x), dx)

    def grad_x(self, x, dx):
        x = np.asarray(x, dtype=float)
        dM = _metric_derivative(self.M, self.jac_M, x, x.shape[-1])
        if dM is None:
            return np.zeros(np.broadcast_shapes(x.shape, np.shape(dx)))
        return 0.5 * np.einsum("...i,...kij,...j->...k", dx, dM, dx)

    def grad_dx(self, x, dx):
        Mx = self.metric(x)
        return np.einsum("...i,...ij->...j", dx, 0.5 * (Mx + np.swapaxes(Mx, -1, -2)))


@dataclass(frozen=True, eq=False)
class ShiftedStorage:
    """Storage ``S_s(x)`` for shifted passivity at ``anchor`` with output ``h``."""

    value: Callable
    anchor: EquilibriumPair
    h: Callable
    grad: Optional[Callable] = None

    def __call__(self, x):
        return np.asarray(self.value(np.asarray(x, dtype=float)), dtype=float)

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        if self.grad is not None:
            return np.asarray(self.grad(x), dtype=float)
        return numerical_jacobian(lambda xx: self(xx)[..., None], x)[..., 0, :]


@dataclass
class PassivityReport:
    """Outcome of a sampled certificate check.

    ``worst_margin`` is the largest value of the quantity that must be
    non-positive; ``identity_residual`` is the largest residual of the
    accompanying equality condition, when there is one. A sample counts as a
    violation when its margin exceeds ``tolerance`` or its residual exceeds
    ``equality_tolerance``.
    """

    property: str
    samples: int
    violations: int
    worst_margin: float
    witnesses: list
    tolerance: float
    seed: Optional[int] = None
    identity_residual: Optional[float] = None
    equality_tolerance: Optional[float] = None
    errors: int = 0
    details: dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.violations == 0

    def to_dict(self):
        def clean(v):
            if isinstance(v, float) and not np.isfinite(v):
                return str(v)
            return v

        return {
            "property": self.property,
            "samples": int(self.samples),
            "violations": int(self.violations),
            "passed": self.passed,
            "worst_margin": clean(float(self.worst_margin)),
            "identity_residual": (None if self.identity_residual is None
                                  else clean(float(self.identity_residual))),
            "tolerance": self.tolerance,
            "equality_tolerance": self.equality_tolerance,
            "seed": self.seed,
            "errors": self.errors,
            "witnesses": [{k: clean(v) for k, v in w.items()} for w in self.witnesses],
            "details": self.details,
        }


@dataclass(frozen=True)
class SampleBox:
    """Axis-aligned sampling box over concatenated (state, input) coordinates."""

    lower: Any
    upper: Any
    count: int = 100_000
    seed: int = 42
    strategy: str = "uniform"

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ContractError("lower and upper bounds must be 1-D with equal length")
        if np.any(lo > hi):
            raise ContractError("lower bound exceeds upper bound")
        if int(self.count) < 1:
            raise ContractError("sample count must be at least 1")
        if self.strategy not in ("uniform", "grid"):
            raise ContractError(f"unknown sampling strategy {self.strategy!r}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "count", int(self.count))

    @classmethod
    def from_bounds(cls, x_bounds, u_bounds=(), **kwargs):
        bounds = list(x_bounds) + list(u_bounds)
        return cls([b[0] for b in bounds], [b[1] for b in bounds], **kwargs)

    @property
    def dim(self):
        return self.lower.size

    def _grid(self):
        k = max(1, int(np.floor(self.count ** (1.0 / self.dim) + 1e-9)))
        axes = [np.linspace(lo, hi, k) if k > 1 else np.array([(lo + hi) / 2])
                for lo, hi in zip(self.lower, self.upper)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def n_samples(self):
        if self.strategy == "grid":
            k = max(1, int(np.floor(self.count ** (1.0 / self.dim) + 1e-9)))
            return k ** self.dim
        return self.count

    def chunks(self, stream=0):
        """Yield ``(index, points)`` chunks; ``stream`` selects an independent draw."""
        if self.strategy == "grid" and stream == 0:
            pts = self._grid()
            for k, start in enumerate(range(0, len(pts), CHUNK)):
                yield k, pts[start:start + CHUNK]
            return
        total = self.n_samples()
        for k, start in enumerate(range(0, total, CHUNK)):
            size = min(CHUNK, total - start)
            rng = np.random.default_rng([self.seed, stream, k])
            yield k, self.lower + (self.upper - self.lower) * rng.random((size, self.dim))

    def sample(self, stream=0):
        return np.concatenate([c for _, c in self.chunks(stream)], axis=0)


def _unit_vectors(seed, chunk, size, dim):
    rng = np.random.default_rng([seed, 1000003, chunk])
    v = rng.standard_normal((size, dim))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _evaluate_chunk(fn, points, extra):
    """Evaluate one chunk; fall back to per-sample calls if the batch raises."""
    try:
        with np.errstate(all="ignore"):
            margin, residual = fn(points, extra)
        margin = np.broadcast_to(np.asarray(margin, dtype=float), points.shape[:1]).copy()
        residual = (None if residual is None
                    else np.broadcast_to(np.asarray(residual, dtype=float), points.shape[:1]).copy())
        return margin, residual, {}
    except Exception:
        pass
    margin = np.empty(len(points))
    residual = np.zeros(len(points))
    has_residual = False
    errors = {}
    for i in range(len(points)):
        e = None if extra is None else extra[i:i + 1]
        try:
            with np.errstate(all="ignore"):
                mi, ri = fn(points[i:i + 1], e)
            margin[i] = np.asarray(mi, dtype=float).reshape(-1)[0]
            if ri is not None:
                has_residual = True
                residual[i] = np.asarray(ri, dtype=float).reshape(-1)[0]
        except Exception as exc:  # recorded as witness, see _run_check
            margin[i] = np.inf
            errors[i] = f"{type(exc).__name__}: {exc}"
    return margin, residual if has_residual else None, errors


def _run_check(prop, box, tol, fn, extra_fn=None, eq_tol=None, workers=1, details=None):
    tasks = []
    for k, pts in box.chunks():
        extra = None if extra_fn is None else extra_fn(k, len(pts))
        tasks.append((pts, extra))

    def work(task):
        return _evaluate_chunk(fn, *task)

    if workers and workers > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, tasks))
    else:
        results = [work(t) for t in tasks]

    points = np.concatenate([t[0] for t in tasks])
    extras = None if extra_fn is None else np.concatenate([t[1] for t in tasks])
    margin = np.concatenate([r[0] for r in results])
    residual = None
    if any(r[1] is not None for r in results):
        residual = np.concatenate([r[1] if r[1] is not None else np.zeros(len(r[0]))
                                   for r in results])
    errors = {}
    offset = 0
    for (pts, _), r in zip(tasks, results):
        errors.update({offset + i: msg for i, msg in r[2].items()})
        offset += len(pts)

    margin = np.where(np.isfinite(margin), margin, np.inf)
    score = margin - tol
    bad = margin > tol
    if residual is not None:
        residual = np.where(np.isfinite(residual), residual, np.inf)
        score = np.maximum(score, residual - eq_tol)
        bad |= residual > eq_tol
    order = np.argsort(-score, kind="stable")[:MAX_WITNESSES]
    witnesses = []
    for i in order:
        w = {"index": int(i), "point": points[i].tolist(), "margin": float(margin[i])}
        if extras is not None:
            w["auxiliary"] = extras[i].tolist()
        if residual is not None:
            w["residual"] = float(residual[i])
        if int(i) in errors:
            w["error"] = errors[int(i)]
        witnesses.append(w)
    return PassivityReport(
        property=prop, samples=len(points), violations=int(bad.sum()),
        worst_margin=float(margin.max()), witnesses=witnesses, tolerance=tol,
        seed=box.seed, identity_residual=None if residual is None else float(residual.max()),
        equality_tolerance=eq_tol if residual is not None else None,
        errors=len(errors), details=details or {})


def _check_box(box, dim, what):
    if box.dim != dim:
        raise ContractError(f"{what}: box has {box.dim} coordinates, expected {dim}")


def krasovskii_output(sys, storage):
    """Output map ``h_K(x, u) = (dS_K/du)^T``.

    For canonical storage this is the closed form ``g(x)^T M(x) f(x, u)``.
    """
    if storage.kind == "canonical":
        def h_K(x, u):
            x = as_vector(x, sys.n, "x")
            Mf = np.einsum("...ij,...j->...i", storage.metric(x), evaluate_f(sys, x, u))
            return np.einsum("...ij,...i->...j", sys.input_matrix(x), Mf)
        return h_K
    return storage.grad_u


def verify_krasovskii(sys, storage, box, tol=DEFAULT_TOL, h_K=None, eq_tol=EQUALITY_TOL, workers=1):
    """Sample ``dS_K/dx f <= 0`` and ``(dS_K/du)^T = h_K`` over ``box``.

    ``h_K`` defaults to :func:`krasovskii_output`; pass a model's own output
    map to test it against the storage gradient.
    """
    _check_box(box, sys.n + sys.m, "verify_krasovskii")
    out = krasovskii_output(sys, storage) if h_K is None else h_K
    n = sys.n

    def fn(p, _):
        x, u = p[:, :n], p[:, n:]
        margin = np.sum(storage.grad_x(x, u) * evaluate_f(sys, x, u), axis=-1)
        resid = np.linalg.norm(storage.grad_u(x, u) - np.asarray(out(x, u)).reshape(len(p), -1),
                               axis=-1)
        return margin, resid

    return _run_check("krasovskii", box, tol, fn, eq_tol=eq_tol, workers=workers)


def krasovskii_from_differential(sys, dstorage, anchor):
    """Krasovskii storage ``S_D(x, f(x,u))`` and output ``h_d(x) f(x,u)``."""
    storage = KrasovskiiStorage.canonical(sys, dstorage.M, anchor, jac_M=dstorage.jac_M)
    if dstorage.h_d is None:
        return storage, None

    def h_K(x, u):
        return np.einsum("...ij,...j->...i", np.asarray(dstorage.h_d(x), dtype=float),
                         evaluate_f(sys, x, u))

    return storage, h_K


def verify_differential(sys, dstorage, box, tol=DEFAULT_TOL, eq_tol=EQUALITY_TOL, workers=1):
    """Sample the differential passivity certificate.

    Tangent vectors are drawn on the unit sphere; the margin is
    ``dS_D/dx f + dS_D/d(dx) F dx``.
    """
    _check_box(box, sys.n + sys.m, "verify_differential")
    n = sys.n

    def fn(p, dx):
        x, u = p[:, :n], p[:, n:]
        Mx = dstorage.metric(x)
        margin = (np.sum(dstorage.grad_x(x, dx) * evaluate_f(sys, x, u), axis=-1)
                  + _quad(dx, Mx, np.einsum("...ij,...j->...i", evaluate_F(sys, x, u), dx)))
        resid = None
        if dstorage.h_d is not None:
            lhs = np.einsum("...i,...ij->...j", dstorage.grad_dx(x, dx), sys.input_matrix(x))
            rhs = np.einsum("...ij,...j->...i", np.asarray(dstorage.h_d(x), dtype=float), dx)
            resid = np.linalg.norm(lhs - rhs, axis=-1)
        return margin, resid

    return _run_check("differential", box, tol, fn,
                      extra_fn=lambda k, size: _unit_vectors(box.seed, k, size, n),
                      eq_tol=eq_tol if dstorage.h_d is not None else None, workers=workers)


def shifted_output(sys, storage, anchor=None):
    """Shifted-passivity output ``h(x) = (dS_K(x, u*)/dx g(x))^T``."""
    anchor = storage.anchor if anchor is None else anchor
    u_star = anchor.u_star

    def h(x):
        x = as_vector(x, sys.n, "x")
        ub = np.broadcast_to(u_star, x.shape[:-1] + (sys.m,))
        return np.einsum("...i,...ij->...j", storage.grad_x(x, ub), sys.input_matrix(x))

    return h


def shifted_storage(sys, storage, anchor=None):
    """Shifted storage ``S_s(x) = S_K(x, u*)`` paired with :func:`shifted_output`."""
    anchor = storage.anchor if anchor is None else anchor
    u_star = anchor.u_star

    def ub(x):
        return np.broadcast_to(u_star, np.shape(x)[:-1] + (sys.m,))

    return ShiftedStorage(value=lambda x: storage(x, ub(x)), anchor=anchor,
                          h=shifted_output(sys, storage, anchor),
                          grad=lambda x: storage.grad_x(x, ub(x)))


def verify_shifted(sys, sstorage, box, tol=DEFAULT_TOL, workers=1):
    """Sample ``dS_s/dx f(x,u) <= (u - u*)^T (h(x) - h(x*))`` over ``box``."""
    _check_box(box, sys.n + sys.m, "verify_shifted")
    n = sys.n
    x_star, u_star = sstorage.anchor.x_star, sstorage.anchor.u_star
    h_star = np.asarray(sstorage.h(x_star), dtype=float).reshape(-1)

    def fn(p, _):
        x, u = p[:, :n], p[:, n:]
        lhs = np.sum(sstorage.gradient(x) * evaluate_f(sys, x, u), axis=-1)
        hx = np.asarray(sstorage.h(x), dtype=float).reshape(len(p), -1)
        rhs = np.sum((u - u_star) * (hx - h_star), axis=-1)
        return lhs - rhs, None

    return _run_check("shifted", box, tol, fn, workers=workers)


def verify_passivity(sys, storage_fn, box, tol=DEFAULT_TOL, grad=None, workers=1):
    """Standard passivity: shifted passivity at (0, 0) with the system output."""
    zero = EquilibriumPair(np.zeros(sys.n), np.zeros(sys.m))
    sstorage = ShiftedStorage(storage_fn, zero, sys.output, grad)
    report = verify_shifted(sys, sstorage, box, tol, workers=workers)
    report.property = "passivity"
    return report


def incremental_output(sys, M, x, x_prime, segments=64):
    """Path-integral output ``int_0^1 g(s x + (1-s) x')^T M (x - x') ds``.

    Integrated with composite Simpson on the straight line; an odd segment
    count is rounded up.
    """
    x = as_vector(x, sys.n, "x")
    x_prime = as_vector(x_prime, sys.n, "x_prime")
    segments = max(2, int(segments))
    segments += segments % 2
    s = np.linspace(0.0, 1.0, segments + 1)
    w = np.ones(segments + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    w *= 1.0 / (3.0 * segments)
    delta = x - x_prime
    shape = (segments + 1,) + (1,) * (np.ndim(delta) - 1) + (1,)
    path = s.reshape(shape) * x + (1.0 - s.reshape(shape)) * x_prime
    Md = np.einsum("ij,...j->...i", np.asarray(M, dtype=float).reshape(sys.n, sys.n), delta)
    integrand = np.einsum("s...ij,...i->s...j", sys.input_matrix(path), Md)
    return np.tensordot(w, integrand, axes=(0, 0))


def incremental_shifted_output(sys, M, x_star, segments=64):
    """Shifted output ``h(x) = h_I(x, x*)`` obtained from incremental passivity."""
    return lambda x: incremental_output(sys, M, x, x_star, segments)


def _input_jacobians(sys, x):
    if sys.jac_g is not None:
        return np.asarray(sys.jac_g(x), dtype=float)
    nm = sys.n * sys.m
    flat = numerical_jacobian(lambda xx: sys.input_matrix(xx).reshape(xx.shape[:-1] + (nm,)), x)
    # flat[..., i*m + k, j] = d g_{ik} / d x_j  ->  [..., k, i, j]
    return np.moveaxis(flat.reshape(x.shape[:-1] + (sys.n, sys.m, sys.n)), -2, -3)


def check_exactness(sys, M, box, tol=DEFAULT_TOL, workers=1):
    """Test local exactness of the one-forms ``g_i(x)^T M dx``.

    The margin at a sample is the largest entry of ``|J - J^T|`` over all
    input channels, where ``J`` is the Jacobian of ``x -> M^T g_i(x)``.
    ``box`` may cover the state alone or the state and input.
    """
    if box.dim not in (sys.n, sys.n + sys.m):
        raise ContractError("check_exactness: box must have n or n+m coordinates")
    M = np.asarray(M, dtype=float).reshape(sys.n, sys.n)
    n = sys.n

    def fn(p, _):
        J = np.einsum("ai,...kij->...kaj", M.T, _input_jacobians(sys, p[:, :n]))
        asym = np.abs(J - np.swapaxes(J, -1, -2))
        return asym.reshape(len(p), -1).max(axis=-1), None

    return _run_check("exactness", box, tol, fn, workers=workers)


def verify_incremental(sys, M, box, tol=DEFAULT_TOL, segments=64, workers=1):
    """Sample the generalized incremental passivity inequality over pairs.

    Storage is ``(x - x')^T M (x - x') / 2`` and the output is
    :func:`incremental_output`. The second point of each pair comes from an
    independent draw over the same box.
    """
    _check_box(box, sys.n + sys.m, "verify_incremental")
    M = np.asarray(M, dtype=float).reshape(sys.n, sys.n)
    Ms = 0.5 * (M + M.T)
    n = sys.n
    second = {k: pts for k, pts in box.chunks(stream=2)}

    def fn(p, q):
        x, u = p[:, :n], p[:, n:]
        xp, up = q[:, :n], q[:, n:]
        d = x - xp
        lhs = _quad(d, Ms, evaluate_f(sys, x, u) - evaluate_f(sys, xp, up))
        rhs = np.sum((u - up) * incremental_output(sys, M, x, xp, segments), axis=-1)
        return lhs - rhs, None

    return _run_check("incremental", box, tol, fn, extra_fn=lambda k, size: second[k],
                      workers=workers)


def dissipation_check(traj, storage_values, supply, tol=DEFAULT_TOL, rtol=1e-9):
    """Check ``S(t2) - S(t1) <= int_{t1}^{t2} supply dt + tol`` for all grid pairs.

    ``traj`` is a :class:`~kpbc.simulation.Trajectory` or a time array. The
    supply integral uses the trapezoidal rule. Every pair ``t1 < t2`` is
    covered through a running minimum; ``violations`` counts end points
    ``t2`` whose worst pair exceeds ``tol``.
    """
    t = np.asarray(getattr(traj, "t", traj), dtype=float)
    S = np.asarray(storage_values, dtype=float).reshape(-1)
    w = np.asarray(supply, dtype=float).reshape(-1)
    if not (t.size == S.size == w.size):
        raise ContractError("time, storage and supply samples must have equal length")
    if t.size < 2:
        return PassivityReport("dissipation", 0, 0, 0.0, [], tol)
    dt = np.diff(t)
    if np.any(dt <= 0) or not np.allclose(dt, dt[0], rtol=rtol, atol=0.0):
        raise ContractError("dissipation_check needs a uniform grid; resample first")
    W = np.concatenate([[0.0], np.cumsum(0.5 * dt * (w[1:] + w[:-1]))])
    D = S - W
    running = np.minimum.accumulate(D)
    arg = np.maximum.accumulate(np.where(D == running, np.arange(D.size), 0))
    prev_min, prev_arg = running[:-1], arg[:-1]
    excess = D[1:] - prev_min
    order = np.argsort(-excess, kind="stable")[:MAX_WITNESSES]
    witnesses = [{"t1": float(t[prev_arg[i]]), "t2": float(t[i + 1]), "margin": float(excess[i])}
                 for i in order]
    return PassivityReport(
        property="dissipation", samples=t.size * (t.size - 1) // 2,
        violations=int(np.sum(excess > tol)), worst_margin=float(excess.max()),
        witnesses=witnesses, tolerance=tol)


def verify_positivity(value_fn, box, floor=0.0, exclude=None, radius=0.0, workers=1):
    """Sample ``value_fn > floor`` over ``box``, skipping points near a set.

    ``exclude`` maps sample points to a distance; samples with distance at
    most ``radius`` are ignored (margin forced to ``-inf``).
    """

    def fn(p, _):
        v = np.asarray(value_fn(p), dtype=float).reshape(len(p))
        margin = floor - v
        if exclude is not None:
            margin = np.where(np.asarray(exclude(p)) > radius, margin, -np.inf)
        return margin, None

    report = _run_check("positivity", box, -np.finfo(float).tiny, fn, workers=workers)
    report.details = {"floor": floor, "radius": radius}
    return report
