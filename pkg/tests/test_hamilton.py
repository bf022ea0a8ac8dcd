import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distflag.class47 import annihilator
from distflag.hamilton import (
    STRATA,
    ControlCurve,
    CotangentPoint,
    HamiltonianSystem,
    IntegrationError,
    NotIntegralError,
    PathOnX,
    RefusedByTheory,
    constraint_derivative_check,
    cotangent_chart,
    endpoint_jacobian_rank,
    endpoint_map,
    ham_field,
    ham_lift,
    hamiltonian_flow,
    integrate_constrained,
    integrate_path,
    lift_to_Z,
    recover_controls,
    smooth_random_controls,
    stratum_costate,
    stratum_integrate,
    stratum_of,
    synthesize_singular,
    verify_singular_adjoint,
    zeta_hamiltonians,
)
from distflag.models import epsilon_family
from distflag.prolong import cone_vector

Z0 = np.array([0.1, -0.2, 0.3, 0.0, 0.2, -0.1, 0.05, 0.4, -0.6])


@pytest.fixture(scope="module")
def synth(prolong_eps0):
    return synthesize_singular(prolong_eps0, Z0, 1.0, 0.3, horizon=0.5)


def test_ham_lift_is_linear_in_costate(eps1):
    xi = eps1.fields[0]
    x = np.linspace(-0.5, 0.5, 7)
    p, q = np.arange(7.0), np.ones(7)
    lhs = ham_lift(xi, CotangentPoint(x, 2 * p - q))
    assert lhs == pytest.approx(2 * ham_lift(xi, CotangentPoint(x, p)) - ham_lift(xi, CotangentPoint(x, q)))


def test_symbolic_and_numeric_hamiltonian_fields_agree(eps1):
    rng = np.random.default_rng(0)
    sysm = HamiltonianSystem(eps1.fields)
    for f in range(4):
        X = ham_field(eps1.fields[f])
        assert X.chart == cotangent_chart(eps1.chart)
        for _ in range(5):
            x, p = rng.normal(size=7), rng.normal(size=7)
            u = np.eye(4)[f]
            xdot, pdot = sysm.rhs(x, p, u)
            assert np.allclose(X.eval(np.concatenate([x, p])), np.concatenate([xdot, pdot]), atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_unconstrained_flow_conserves_constant_control_hamiltonian(seed):
    rng = np.random.default_rng(seed)
    model = epsilon_family(1)
    u = rng.normal(size=4)
    init = CotangentPoint(rng.uniform(-0.5, 0.5, 7), rng.normal(size=7))
    bic = hamiltonian_flow(model.fields, init, ControlCurve.constant(u, 0.5), step=1e-2)
    H = HamiltonianSystem(model.fields).hamiltonians(bic.states, bic.costates) @ u
    assert np.max(np.abs(H - H[0])) < 1e-8 * max(1.0, abs(H[0]))


def test_control_curve_interpolation():
    c = ControlCurve.uniform([[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]], horizon=2.0)
    assert np.allclose(c(0.5), [1.0, 2.0])
    assert np.allclose(c(5.0), [4.0, 5.0])
    assert c.hat_weights(1.3).sum() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        ControlCurve([0.0, 0.0], [[1.0], [1.0]])
    with pytest.raises(ValueError):
        ControlCurve([0.0, 1.0], [[np.nan], [1.0]])


def test_strata_certify_on_flat_model(prolong_eps0):
    for k, s in enumerate(STRATA):
        q0 = stratum_costate(prolong_eps0, Z0, s, seed=k)
        assert stratum_of(prolong_eps0, Z0, q0) == s
        bic, pz = stratum_integrate(prolong_eps0, s, CotangentPoint(Z0, q0), horizon=0.3, step=1e-3)
        assert bic.ok, (s, bic.certificate())
        assert bic.max_residual < 1e-8
        assert np.min(bic.nonvanishing) > 0
        h = zeta_hamiltonians(prolong_eps0, bic.states[-1], bic.costates[-1])
        assert np.max(np.abs(h[: STRATA[s][0]])) < 1e-8 * np.linalg.norm(bic.costates[-1]) * 10


def test_regular_point_refuses_stratum_d(prolong_eps1):
    z = np.concatenate([np.zeros(7), [1.0, 0.0]])
    q0 = stratum_costate(prolong_eps1, z, "d")
    with pytest.raises(RefusedByTheory):
        stratum_integrate(prolong_eps1, "d", CotangentPoint(z, q0), horizon=0.1)
    for s in ("a", "b", "c"):
        q0 = stratum_costate(prolong_eps1, z, s)
        bic, _ = stratum_integrate(prolong_eps1, s, CotangentPoint(z, q0), horizon=0.1)
        assert bic.ok


def test_wrong_stratum_costate_rejected(prolong_eps0):
    q0 = stratum_costate(prolong_eps0, Z0, "a")
    with pytest.raises(ValueError):
        stratum_integrate(prolong_eps0, "c", CotangentPoint(Z0, q0), horizon=0.1)


def test_synthesized_path_lies_in_cone(synth):
    assert synth.cone_residual_max < 1e-8
    assert synth.bichar.ok
    assert synth.fiber_costate_max < 1e-8
    assert synth.path_x.is_immersive()
    assert np.allclose(synth.path_x.initial_direction(),
                       synth.path_x.velocities[0] / np.linalg.norm(synth.path_x.velocities[0]))


def test_synthesized_path_passes_both_oracles(synth, eps0):
    adj = verify_singular_adjoint(eps0.fields, synth.path_x)
    assert adj.verdict and adj.residual < 1e-6
    ep = endpoint_jacobian_rank(eps0.fields, synth.control_curve(20), synth.path_x.points[0])
    assert ep.rank <= 6 and ep.critical


def test_reparametrized_path_stays_singular(synth, eps0):
    for c in (-1.0, 2.0):
        g = synth.path_x.reparametrize(c)
        assert verify_singular_adjoint(eps0.fields, g).verdict


def test_lift_round_trip(synth, prolong_eps0):
    pz = lift_to_Z(prolong_eps0, synth.path_x)
    assert np.max(np.abs(pz.points - synth.path_z.points)) < 1e-9


def test_costate_from_prolongation_is_a_base_costate(synth, eps0):
    # the x-part of the stratum-(d) costate annihilates D all along the curve
    D = np.stack([eps0.frame.eval(x) for x in synth.path_x.points[::50]])
    p = synth.costate_x[::50]
    rel = np.abs(np.einsum("kn,knm->km", p, D)).max(axis=1) / np.linalg.norm(p, axis=1)
    assert rel.max() < 1e-8


def test_base_integration_reproduces_synthesized_bicharacteristic(synth, eps0):
    ctrl = ControlCurve(synth.path_x.times, synth.controls_x)
    init = CotangentPoint(synth.path_x.points[0], synth.costate_x[0])
    bic = integrate_constrained(eps0.fields, init, ctrl, step=synth.path_x.times[1])
    assert np.max(np.abs(bic.states - synth.path_x.points)) < 1e-9
    pn = synth.costate_x / np.linalg.norm(synth.costate_x, axis=1, keepdims=True)
    qn = bic.costates / np.linalg.norm(bic.costates, axis=1, keepdims=True)
    assert np.max(np.abs(pn - qn)) < 1e-8
    assert constraint_derivative_check(eps0.fields, bic) < 1e-8  # controls are linear in t here


def test_constrained_integration_rejects_bad_initial_data(eps0):
    x0 = np.zeros(7)
    ctrl = ControlCurve.constant([1.0, 0, 0, 0], 0.1)
    with pytest.raises(IntegrationError, match="vanishes"):
        integrate_constrained(eps0.fields, CotangentPoint(x0, np.zeros(7)), ctrl)
    with pytest.raises(IntegrationError, match="violates"):
        integrate_constrained(eps0.fields, CotangentPoint(x0, np.eye(7)[0]), ctrl)


def test_constrained_integration_aborts_off_cone(eps0):
    x0 = np.zeros(7)
    p0 = annihilator(eps0.frame, x0)[:, 0]
    ctrl = ControlCurve.constant([1.0, 0.3, -0.7, 0.9], 1.0)  # u1 u4 - u2 u3 != 0
    with pytest.raises(IntegrationError):
        integrate_constrained(eps0.fields, CotangentPoint(x0, p0), ctrl, step=1e-2)


def test_refusal_at_regular_direction(prolong_eps1):
    z = np.concatenate([np.zeros(7), [1.0, 0.0]])
    with pytest.raises(RefusedByTheory) as err:
        synthesize_singular(prolong_eps1, z, 1.0, 0.0, horizon=0.1)
    assert err.value.witness["type"] == "Regular"


def test_generic_path_fails_both_oracles(eps0):
    rng = np.random.default_rng(4)
    ctrl = smooth_random_controls(rng, nodes=20)
    x0 = rng.uniform(-0.5, 0.5, 7)
    gamma = integrate_path(eps0.fields, ctrl, x0)
    assert not verify_singular_adjoint(eps0.fields, gamma).verdict
    ep = endpoint_jacobian_rank(eps0.fields, ctrl, x0)
    assert ep.rank == 7 and not ep.critical
    assert np.allclose(endpoint_map(eps0.fields, ctrl, x0), gamma.points[-1], atol=1e-12)


def test_non_integral_path_rejected(eps0):
    t = np.linspace(0, 1, 11)
    pts = np.outer(t, np.eye(7)[2])  # moves along s, which is transverse to D at the origin
    gamma = PathOnX(eps0.chart, t, pts, np.tile(np.eye(7)[2], (11, 1)))
    with pytest.raises(NotIntegralError):
        recover_controls(eps0.fields, gamma)


def test_endpoint_rank_independent_of_thread_count(synth, eps0, monkeypatch):
    ctrl = synth.control_curve(10)
    x0 = synth.path_x.points[0]
    monkeypatch.setenv("DISTFLAG_THREADS", "1")
    a = endpoint_jacobian_rank(eps0.fields, ctrl, x0)
    monkeypatch.setenv("DISTFLAG_THREADS", "3")
    b = endpoint_jacobian_rank(eps0.fields, ctrl, x0)
    assert np.array_equal(a.singular_values, b.singular_values)


def test_synthesis_is_deterministic(prolong_eps0):
    a = synthesize_singular(prolong_eps0, Z0, 1.0, -0.2, horizon=0.2, seed=3)
    b = synthesize_singular(prolong_eps0, Z0, 1.0, -0.2, horizon=0.2, seed=3)
    assert np.array_equal(a.path_x.points, b.path_x.points)
    assert np.array_equal(a.costate_x, b.costate_x)


def test_initial_direction_is_the_cone_vector(synth):
    u = cone_vector(1, Z0[7], Z0[8])
    assert np.allclose(synth.controls_x[0] / np.linalg.norm(synth.controls_x[0]), u / np.linalg.norm(u))
