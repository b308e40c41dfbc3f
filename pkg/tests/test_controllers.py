import warnings

import numpy as np
import pytest

from kpbc.controllers import (FirstOrderKPBCConfig, KrasovskiiPBCConfig, KrasovskiiPBCState,
                              OpenLoopInput, ShiftedPBCConfig, assemble_closed_loop,
                              eval_S1, eval_S2, kpbc_first_order, kpbc_rhs, monitor_outputs,
                              sine_signal, spbc_rhs, transfer_coefficients)
from kpbc.errors import ConfigurationError, ContractError
from kpbc.models import zeta_storage, zeta_system
from kpbc.simulation import rk4_step

X_STAR = np.array([1 / 9, 1 / 3, 1 / 3, 1 / 3])
US = 0.25


def kcfg(**kw):
    return KrasovskiiPBCConfig(**{"K1": 1, "K2": 1, "K3": 1, "u_star": US, **kw})


def scfg(**kw):
    return ShiftedPBCConfig(**{"K4": 1, "K5": 1, "K6": 1, "K7": 1, "u_star": US, **kw})


def test_gain_validation():
    with pytest.raises(ConfigurationError):
        kcfg(K1=0.0)
    with pytest.raises(ConfigurationError):
        kcfg(K2=-1.0)
    with pytest.raises(ConfigurationError):
        FirstOrderKPBCConfig(K2=0.0, K3=1.0, u_star=US)
    with pytest.raises(ConfigurationError):
        scfg(K4=[[1.0, 0.0], [0.0, -1.0]], K5=0, K6=0, K7=0, u_star=[0, 0])
    with pytest.raises(ConfigurationError):
        scfg(K7=[[1.0, 2.0], [2.0, 1.0]], u_star=[0.0, 0.0])
    with pytest.raises(ConfigurationError):
        kcfg(K1=np.eye(2))
    with pytest.raises(ConfigurationError):
        kcfg(nu1=3.0)


def test_asymmetric_gain_symmetrized():
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        cfg = kcfg(K1=[[2.0, 0.2], [0.0, 2.0]], K2=np.eye(2), K3=np.eye(2), u_star=[0.0, 0.0])
    assert any("symmetric" in str(x.message) for x in w)
    np.testing.assert_array_equal(cfg.K1, [[2.0, 0.1], [0.1, 2.0]])


def test_kpbc_rhs_examples():
    du, duk = kpbc_rhs(kcfg(), KrasovskiiPBCState(US, 0.0), 0.0)
    assert du[0] == 0.0 and duk[0] == 0.0
    du, duk = kpbc_rhs(kcfg(), KrasovskiiPBCState(US, 1.0), 0.0)
    assert du[0] == 1.0 and duk[0] == pytest.approx(-1.0)
    cfg = kcfg(K1=2.0, nu1=lambda t: np.array([t]))
    _, duk = kpbc_rhs(cfg, KrasovskiiPBCState(US + 1, 0.5), 0.25, t=3.0)
    assert duk[0] == pytest.approx((3.0 - 0.5 - 1.0 - 0.25) / 2.0)


def test_kpbc_first_order_examples():
    cfg = FirstOrderKPBCConfig(K2=1.0, K3=1.0, u_star=US)
    assert kpbc_first_order(cfg, US, 0.0)[0] == 0.0
    cfg = FirstOrderKPBCConfig(K2=2.0, K3=1.0, u_star=US)
    assert kpbc_first_order(cfg, US + 1, 0.5)[0] == pytest.approx(-0.75)
    cfg = FirstOrderKPBCConfig(K2=4.0, K3=0.0, u_star=US)
    assert kpbc_first_order(cfg, 7.0, 2.0)[0] == pytest.approx(-0.5)


def test_kpbc_matrix_gains(rng):
    A = rng.normal(size=(2, 2))
    K1 = A @ A.T + np.eye(2)
    cfg = KrasovskiiPBCConfig(K1=K1, K2=np.eye(2), K3=np.diag([1.0, 0.0]), u_star=[0.1, 0.2])
    st = KrasovskiiPBCState([0.3, 0.1], [0.5, -0.5])
    _, duk = kpbc_rhs(cfg, st, [0.2, 0.4])
    expected = np.linalg.solve(K1, -np.array([0.5, -0.5]) - np.array([0.2, 0.0]) - [0.2, 0.4])
    np.testing.assert_allclose(duk, expected)


def test_spbc_rhs_examples():
    u, dv = spbc_rhs(scfg(K4=2.0, nu2=lambda t: np.array([1.0])), 0.0, 0.0)
    assert u[0] == US and dv[0] == pytest.approx(0.5)
    u, dv = spbc_rhs(scfg(), 0.1, 0.2)
    assert u[0] == pytest.approx(US - 0.1)
    assert dv[0] == pytest.approx(-0.3)


def test_storage_examples():
    st = zeta_storage()
    cfg = kcfg()
    assert eval_S1(st, cfg, X_STAR, [US], [0.0]) == 0.0
    assert eval_S1(st, cfg, X_STAR, [0.0], [0.0]) == pytest.approx(19 / 162 + 1 / 32, abs=1e-15)
    assert eval_S1(st, kcfg(K1=3.0), X_STAR, [US], [0.5]) == pytest.approx(0.5 * 3 * 0.25)
    sc = scfg(K4=2.0)
    assert eval_S2(st, sc, X_STAR, [0.0]) == 0.0
    assert eval_S2(st, sc, np.zeros(4), [0.0]) == pytest.approx(1 / 16, abs=1e-15)
    assert eval_S2(st, sc, X_STAR, [0.3]) == pytest.approx(0.5 * 2 * 0.09)


def test_monitor_examples(rng):
    sys, st = zeta_system(), zeta_storage()
    mon = monitor_outputs(st, sys, st.anchor, X_STAR, [US], K3=np.eye(1))
    assert mon.y1 == 0.0 and mon.y2[0] == 0.0 and mon.y3 == 0.0
    mon = monitor_outputs(st, sys, st.anchor, [0.0, 0.0, 0.0, 1.0], [0.0])
    assert mon.y1 == pytest.approx(-1.0)
    x, u = rng.uniform(-0.5, 1.5, (100_000, 4)), rng.uniform(0, 1, (100_000, 1))
    assert np.max(monitor_outputs(st, sys, st.anchor, x, u).y1) <= 0.0


def test_transfer_coefficients():
    tc = transfer_coefficients(kcfg())
    assert [float(k[0, 0]) for k in tc.denominator] == [1.0, 1.0, 1.0]
    assert not tc.singular_at_one
    for w in (0.5, 1.0, 2.0):
        s = 1j * w
        assert tc.exogenous_response(s)[0, 0] == pytest.approx(1 / (s * s + s + 1))
    assert transfer_coefficients(scfg(K5=0.0)).structure == "low-pass"
    assert transfer_coefficients(scfg(K6=0.0)).structure == "static"
    assert transfer_coefficients(scfg(K7=0.0)).structure == "PI"
    sh = transfer_coefficients(scfg(K5=2.0))
    D, K6, K4, K7 = (float(np.ravel(k)[0]) for k in sh.realization)
    assert (D, K6, K4, K7) == (-2.0, 1.0, 1.0, 1.0)
    assert sh.response(0.0)[0, 0] == pytest.approx(-3.0)
    assert transfer_coefficients(scfg(K4=1.0, K7=0.0)).singular_at_one is False
    with pytest.raises(ContractError):
        transfer_coefficients(FirstOrderKPBCConfig(K2=1, K3=1, u_star=US))


def test_transfer_singular_flag():
    cfg = KrasovskiiPBCConfig(K1=np.diag([1.0, 1.0]), K2=np.diag([0.0, 0.0]),
                              K3=np.diag([0.0, 0.0]), u_star=[0.0, 0.0])
    assert not transfer_coefficients(cfg).singular_at_one


def test_frequency_response_scalar():
    # drive the controller with y_K = sin(w t) and read the steady amplitude of u - u*
    for w in (0.5, 1.0, 2.0):
        cfg = kcfg()
        field = lambda t, z: np.concatenate(kpbc_rhs(cfg, KrasovskiiPBCState(z[:1], z[1:]),
                                                     [np.sin(w * t)], t))
        z, t, dt = np.array([US, 0.0]), 0.0, 1e-2
        peak = 0.0
        t_end = 40.0 + 4 * np.pi / w
        while t < t_end - 1e-12:
            z = rk4_step(field, z, t, dt)
            t += dt
            if t > 40.0:
                peak = max(peak, abs(z[0] - US))
        target = abs(1 / ((1j * w) ** 2 + 1j * w + 1))
        assert abs(peak - target) / target < 0.02


def test_assemble_dimensions_and_equilibrium():
    sys, st = zeta_system(), zeta_storage()
    for kind, cfg, dim in (("kpbc", kcfg(), 6),
                           ("kpbc1", FirstOrderKPBCConfig(K2=1, K3=1, u_star=US), 5),
                           ("spbc", scfg(), 5)):
        cl = assemble_closed_loop(sys, st, cfg, kind)
        assert cl.dim == dim
        assert np.max(np.abs(cl.field(0.0, cl.anchor_state))) <= 1e-12
    with pytest.raises(ContractError):
        assemble_closed_loop(sys, st, kcfg(), "spbc")
    with pytest.raises(ContractError):
        assemble_closed_loop(sys, st, kcfg(), "pid")
    with pytest.raises(ContractError):
        assemble_closed_loop(sys, st, kcfg(K1=np.eye(2), K2=np.eye(2), K3=np.eye(2),
                                           u_star=[0, 0]), "kpbc")


def test_spbc_plant_input_uses_shifted_output():
    sys, st = zeta_system(), zeta_storage()
    cl = assemble_closed_loop(sys, st, scfg(K5=2.0, K6=3.0), "spbc")
    z = np.array([0.2, 0.4, 0.1, 0.3, 0.05])
    y = cl.shifted_y(z[:4])[0]
    assert cl.plant_input(0.0, z)[0] == pytest.approx(US - 2 * y + 3 * 0.05)


@pytest.mark.parametrize("kind", ["kpbc", "kpbc1", "spbc"])
def test_storage_rate_identity(kind, rng):
    sys, st = zeta_system(), zeta_storage()
    nu = sine_signal(0.3, omega=2.0)
    cfg = {"kpbc": kcfg(K1=1.5, K2=0.5, K3=2.0, nu1=nu),
           "kpbc1": FirstOrderKPBCConfig(K2=0.7, K3=1.3, u_star=US, nu1=nu),
           "spbc": scfg(K4=1.2, K5=0.4, K6=0.9, K7=0.3, nu2=nu)}[kind]
    cl = assemble_closed_loop(sys, st, cfg, kind)
    for _ in range(20):
        z = rng.uniform(0.0, 1.0, cl.dim)
        t = rng.uniform(0, 5)
        direct = np.dot(cl.storage_gradient(z), cl.field(t, z))
        assert cl.storage_rate(t, z) == pytest.approx(direct, abs=1e-10)


def test_rate_nonpositive_without_excitation(rng):
    sys, st = zeta_system(), zeta_storage()
    cl = assemble_closed_loop(sys, st, kcfg(), "kpbc")
    z = rng.uniform(-0.5, 1.5, (5000, 6))
    assert np.max(cl.storage_rate(0.0, z)) <= 1e-12


def test_open_loop_input():
    sys, st = zeta_system(), zeta_storage()
    ol = OpenLoopInput(lambda t: np.array([0.25 + np.sin(t)]))
    assert ol.rate(0.0)[0] == pytest.approx(1.0, abs=1e-8)
    cl = assemble_closed_loop(sys, st, ol, "open")
    assert cl.dim == 4
    np.testing.assert_allclose(cl.plant_input(np.pi / 2, X_STAR), [1.25])
    assert cl.invariant_set_tags(0.0, X_STAR)["in_set"]
    with pytest.raises(ContractError):
        cl.storage_gradient(X_STAR)


def test_invariant_set_tags():
    sys, st = zeta_system(), zeta_storage()
    cl = assemble_closed_loop(sys, st, kcfg(), "kpbc")
    assert cl.invariant_set_tags(0.0, cl.anchor_state)["in_set"]
    z = cl.anchor_state.copy()
    z[5] = 0.1
    tags = cl.invariant_set_tags(0.0, z)
    assert tags["y1"] and not tags["K2_uK"] and not tags["in_set"]
    sc = assemble_closed_loop(sys, st, scfg(), "spbc")
    assert sc.invariant_set_tags(0.0, sc.anchor_state)["in_set"]
