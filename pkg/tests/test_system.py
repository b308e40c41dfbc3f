import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kpbc.errors import ContractError, SingularPointError, SingularityError, SolverError
from kpbc.models import (ZetaParams, cuberoot_system, linear_system, zeta_krasovskii_output,
                         zeta_system)
from kpbc.system import (EquilibriumPair, InputAffineSystem, VariationalSignal, build_extended,
                         evaluate_F, evaluate_f, find_equilibrium, numerical_jacobian,
                         variational_rhs)

X_STAR = np.array([1 / 9, 1 / 3, 1 / 3, 1 / 3])
finite = st.floats(-2.0, 2.0, allow_nan=False)


def test_f_vanishes_at_equilibrium():
    np.testing.assert_allclose(evaluate_f(zeta_system(), X_STAR, [0.25]), 0.0, atol=1e-15)


def test_f_at_zero_input():
    f = evaluate_f(zeta_system(), X_STAR, [0.0])
    np.testing.assert_allclose(f, [-1 / 3, 1 / 9, -1 / 3, 0.0], atol=1e-15)


def test_zero_input_gives_drift(rng):
    sys = zeta_system()
    x = rng.uniform(-1, 1, (20, 4))
    np.testing.assert_array_equal(evaluate_f(sys, x, np.zeros((20, 1))), sys.drift(x))


@settings(max_examples=60, deadline=None)
@given(st.lists(finite, min_size=4, max_size=4), finite, finite)
def test_affine_in_input(x, u, w):
    sys = zeta_system()
    f = lambda uu: evaluate_f(sys, x, [uu])
    resid = f(u + w) - f(w) - f(u) + f(0.0)
    assert np.max(np.abs(resid)) <= 1e-12 * (1 + np.max(np.abs(f(u + w))))


def test_dimension_mismatch():
    with pytest.raises(ContractError):
        evaluate_f(zeta_system(), [0.0, 0.0, 0.0], [0.0])
    with pytest.raises(ContractError):
        evaluate_f(zeta_system(), X_STAR, [0.0, 1.0])


def test_F_zeta_zero_input():
    F = evaluate_F(zeta_system(), np.array([0.3, -0.2, 0.7, 1.1]), [0.0])
    expected = [[0, -1, 0, 0], [1, 0, 0, 0], [0, 0, 0, -1], [0, 0, 1, -1]]
    np.testing.assert_array_equal(F, expected)


def test_F_linear_is_A(rng):
    A = np.array([[0.0, 1.0], [-2.0, -0.5]])
    sys = linear_system(A, [[0.0], [1.0]])
    for _ in range(5):
        np.testing.assert_array_equal(evaluate_F(sys, rng.normal(size=2), rng.normal(size=1)), A)


def test_F_matches_finite_differences(rng):
    sys = zeta_system(ZetaParams(alpha1=0.7, alpha2=1.3, alpha3=2.0))
    x = rng.uniform(-1, 2, (100, 4))
    u = rng.uniform(0, 1, (100, 1))
    F = evaluate_F(sys, x, u)
    F_fd = numerical_jacobian(lambda xx: evaluate_f(sys, xx, u), x)
    err = np.abs(F - F_fd) / (1 + np.abs(F))
    assert err.max() < 1e-6


def test_F_finite_difference_fallback(rng):
    analytic = zeta_system()
    bare = InputAffineSystem(4, 1, analytic.g0, analytic.g)
    x, u = rng.uniform(-1, 1, 4), [0.25]
    np.testing.assert_allclose(evaluate_F(bare, x, u), evaluate_F(analytic, x, u), atol=1e-8)


def test_F_singular_point_cuberoot():
    with pytest.raises(SingularPointError) as info:
        evaluate_F(cuberoot_system(), [0.0, 1.0], [1.0])
    assert info.value.coordinate == 0


def test_extended_system():
    sys = zeta_system()
    ext = build_extended(sys, zeta_krasovskii_output())
    assert (ext.n, ext.m) == (5, 1)
    z = np.concatenate([X_STAR, [0.25]])
    np.testing.assert_allclose(ext.field(z, [0.0]), 0.0, atol=1e-15)
    np.testing.assert_array_equal(ext.input_matrix(z), [[0], [0], [0], [0], [1]])


def test_extended_is_affine(rng):
    ext = build_extended(zeta_system(), zeta_krasovskii_output())
    z = rng.uniform(-1, 1, 5)
    a, b = rng.normal(size=1), rng.normal(size=1)
    lhs = ext.field(z, a + b) - ext.field(z, a) - ext.field(z, b) + ext.field(z, [0.0])
    assert np.max(np.abs(lhs)) < 1e-12


def test_find_equilibrium_zeta():
    pair = find_equilibrium(zeta_system(), [0.1, 0.3, 0.3, 0.3], [0.25])
    np.testing.assert_allclose(pair.x_star, X_STAR, atol=1e-12)
    assert pair.residual <= 1e-10


def test_find_equilibrium_vstar_half():
    pair = find_equilibrium(zeta_system(), [0.2, 0.4, 0.4, 0.4], [0.5 / 1.5])
    np.testing.assert_allclose(pair.x_star, [0.25, 0.5, 0.5, 0.5], atol=1e-12)


def test_find_equilibrium_linear():
    pair = find_equilibrium(linear_system([[-1.0]], [[1.0]]), [3.0], [0.0])
    np.testing.assert_allclose(pair.x_star, [0.0], atol=1e-12)


def test_find_equilibrium_free_u():
    sys = zeta_system()
    pair = find_equilibrium(sys, [0.1, 0.3, 0.3, 0.3], [0.2], mode="free-u")
    assert np.linalg.norm(evaluate_f(sys, pair.x_star, pair.u_star)) <= 1e-10


def test_find_equilibrium_failures():
    # x' = x^2 + 1 has no real zero
    nozero = InputAffineSystem(1, 1, lambda x: x ** 2 + 1, lambda x: np.zeros(x.shape + (1,)))
    with pytest.raises(SolverError) as info:
        find_equilibrium(nozero, [0.5], [0.0])
    assert info.value.x is not None
    flat = InputAffineSystem(1, 1, lambda x: np.ones_like(x), lambda x: np.zeros(x.shape + (1,)))
    with pytest.raises(SingularityError):
        find_equilibrium(flat, [0.0], [0.0])
    with pytest.raises(ContractError):
        find_equilibrium(zeta_system(), [np.nan, 0, 0, 0], [0.0])


def test_equilibrium_pair():
    pair = EquilibriumPair(X_STAR, 0.25)
    assert pair.distance(X_STAR) == 0.0
    assert pair.to_dict()["u_star"] == [0.25]
    with pytest.raises(ContractError):
        EquilibriumPair(X_STAR, 0.25, residual=-1.0)


def test_variational_signal_dims():
    VariationalSignal(np.zeros(4), np.zeros(1), np.zeros(1)).check(zeta_system())
    with pytest.raises(ContractError):
        VariationalSignal(np.zeros(3), np.zeros(1), np.zeros(1)).check(zeta_system())


def test_variational_consistency_order():
    # d/dt f(x(t),u(t)) = F f + g u' along a trajectory with u = 0.25 + 0.1 sin t
    sys = zeta_system()
    u = lambda t: np.array([0.25 + 0.1 * np.sin(t)])
    du = lambda t: np.array([0.1 * np.cos(t)])

    def traj(t_end, dt):
        x, t = np.array([0.2, 0.1, 0.3, 0.2]), 0.0
        xs = [x]
        for _ in range(int(round(t_end / dt))):
            k1 = evaluate_f(sys, x, u(t))
            k2 = evaluate_f(sys, x + dt / 2 * k1, u(t + dt / 2))
            k3 = evaluate_f(sys, x + dt / 2 * k2, u(t + dt / 2))
            k4 = evaluate_f(sys, x + dt * k3, u(t + dt))
            x = x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            t += dt
            xs.append(x)
        return np.array(xs)

    errs = []
    for dt in (0.02, 0.01, 0.005):
        xs = traj(1.0, dt)
        k = len(xs) // 2
        t = k * dt
        centered = (evaluate_f(sys, xs[k + 1], u(t + dt)) - evaluate_f(sys, xs[k - 1], u(t - dt))) / (2 * dt)
        exact = variational_rhs(sys, xs[k], u(t), evaluate_f(sys, xs[k], u(t)), du(t))
        errs.append(np.linalg.norm(centered - exact))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 1.8)
