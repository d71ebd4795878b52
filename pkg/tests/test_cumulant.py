import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp
from scipy.linalg import expm

from superbranch.cumulant import (
    SolverConfig,
    laplace_functional,
    mass_representation_gap,
    semigroup_residual,
    solve_age_renewal,
    solve_controlled_immigration,
    solve_cumulant,
    solve_inhomogeneous_mass,
    solver_gap,
)
from superbranch.errors import GridError, SolverInstability, ValidationError
from superbranch.mechanisms import LocalMechanism, MassFlow, simple_spec, spec_arrays
from superbranch.sampling import random_spec
from superbranch.zoo import make_mass_structured, make_rebirth

SWAP = [[0.0, 1.0], [1.0, 0.0]]
SYM = [[-1.0, 1.0], [1.0, -1.0]]


def riccati():
    return simple_spec([[0.0]], c=0.5)


def critical_swap():
    return simple_spec(np.zeros((2, 2)), beta=1.0, pis=SWAP)


def rebirth_swap():
    return make_rebirth(np.zeros((2, 2)), 1.0, SWAP)


def test_pure_motion_matches_matrix_exponential():
    spec = simple_spec(SYM)
    t = math.log(2) / 2  # exp(-2t) = 1/2
    cfg = SolverConfig(step=t / 1000)
    v = solve_cumulant(spec, [1.0, 0.0], t, cfg).final
    assert abs(v[0] - 0.75) < 1e-8
    assert np.allclose(v, expm(t * np.array(SYM)) @ [1.0, 0.0], atol=1e-10)


def test_riccati_closed_form():
    field = solve_cumulant(riccati(), [1.0], 1.0)
    for t in (0.25, 0.5, 1.0):
        assert abs(field.at(t)[0] - 1.0 / (1.0 + t / 2)) < 1e-6


def test_critical_swap_closed_form_and_conservation():
    field = solve_cumulant(critical_swap(), [1.0, 0.0], 2.0)
    assert np.all(np.abs(field.values[:, 0] - (1 + np.exp(-2 * field.times)) / 2) < 1e-9)
    assert np.all(np.abs(field.values.sum(axis=1) - 1.0) < 1e-9)


def test_rebirth_swap_hyperbolic_closed_form():
    field = solve_cumulant(rebirth_swap(), [1.0, 0.0], 1.0)
    t = field.times
    assert np.allclose(field.values[:, 0], np.cosh(t), atol=1e-9)
    assert np.allclose(field.values[:, 1], np.sinh(t), atol=1e-9)


def test_rebirth_equals_general_form():
    rb = rebirth_swap()
    general = simple_spec(np.zeros((2, 2)), b=-1.0, beta=1.0, pis=SWAP)
    a = solve_cumulant(rb, [0.3, 1.2], 1.0).values
    b = solve_cumulant(general, [0.3, 1.2], 1.0).values
    assert np.max(np.abs(a - b)) <= 1e-12


def test_zero_data_gives_zero():
    spec = random_spec(np.random.default_rng(0))
    field = solve_cumulant(spec, np.zeros(spec.n_sites), 0.5)
    assert not field.values.any()


def test_horizon_off_grid_rejected():
    with pytest.raises(GridError):
        solve_cumulant(riccati(), [1.0], 0.0015)
    field = solve_cumulant(riccati(), [1.0], 0.5)
    with pytest.raises(GridError):
        field.at(0.2505)


def test_blowup_reports_instability():
    # a stiff system at a coarse step drives RK4 well below zero
    spec = simple_spec([[-50.0, 50.0], [50.0, -50.0]], b=100.0)
    with pytest.raises(SolverInstability):
        solve_cumulant(spec, [1.0, 0.0], 1.0, SolverConfig(step=0.1))


def test_picard_agrees_with_rk4():
    for spec, f in ((riccati(), [1.0]), (critical_swap(), [1.0, 0.0]), (rebirth_swap(), [1.0, 0.0])):
        assert solver_gap(spec, f, 1.0) <= 1e-5


def test_semigroup_residuals():
    assert semigroup_residual(simple_spec(SYM), [1.0, 0.0], 0.5, 0.5) <= 1e-10
    assert semigroup_residual(riccati(), [1.0], 0.5, 0.5) <= 1e-6
    assert semigroup_residual(critical_swap(), [1.0, 0.0], 0.5, 0.5) <= 1e-8


def test_laplace_functional_examples():
    assert laplace_functional([1.0], solve_cumulant(riccati(), [0.0], 1.0), 1.0) == 1.0
    assert abs(laplace_functional([1.0], solve_cumulant(riccati(), [1.0], 1.0), 1.0) - 0.513417) < 1e-6
    val = laplace_functional([1.0, 0.0], solve_cumulant(rebirth_swap(), [1.0, 0.0], 1.0), 1.0)
    assert abs(val - math.exp(-math.cosh(1))) < 1e-9


@given(st.integers(0, 10**6))
@settings(max_examples=15, deadline=None)
def test_rk4_matches_reference_integrator(seed):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng, max_sites=3)
    f = rng.uniform(0, 2, spec.n_sites)
    arr = spec_arrays(spec)
    q = np.array(spec.motion.qmatrix)

    def rhs(t, v):
        return q @ v - arr.phi(np.maximum(v, 0)) - arr.psi(np.maximum(v, 0))

    ref = solve_ivp(rhs, (0, 1), f, method="DOP853", rtol=1e-12, atol=1e-12).y[:, -1]
    assert np.allclose(solve_cumulant(spec, f, 1.0).final, ref, atol=1e-8)


@given(st.integers(0, 10**6), st.floats(0.0, 2.0))
@settings(max_examples=15, deadline=None)
def test_cumulant_is_monotone_in_f(seed, bump):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng, max_sites=3)
    f = rng.uniform(0, 1, spec.n_sites)
    lo = solve_cumulant(spec, f, 0.5).final
    hi = solve_cumulant(spec, f + bump, 0.5).final
    assert np.all(hi >= lo - 1e-12)
    assert np.all(lo >= 0)


# -- controlled immigration ---------------------------------------------------


def _pair(local1, local2, q=None):
    q = np.zeros((1, 1)) if q is None else q
    return simple_spec(q, b=local1[0], c=local1[1]), simple_spec(q, b=local2[0], c=local2[1])


def test_immigration_without_source_reduces_to_standalone():
    s1, s2 = _pair((0.0, 0.5), (0.0, 1.0))
    v1, v2 = solve_controlled_immigration(s1, s2, [0.7], [0.0], 1.0)
    assert not v2.values.any()
    assert np.max(np.abs(v1.values - solve_cumulant(s1, [0.7], 1.0).values)) <= 1e-12
    z1, z2 = solve_controlled_immigration(s1, s2, [0.0], [0.0], 1.0)
    assert not z1.values.any() and not z2.values.any()


def test_immigration_source_term():
    s1, s2 = _pair((0.0, 1.0), (0.0, 1.0))
    v1, v2 = solve_controlled_immigration(s1, s2, [0.0], [1.0], 1.0)
    assert abs(v2.final[0] - 0.5) < 1e-6
    assert v1.final[0] > 0
    half = solve_controlled_immigration(s1, s2, [0.0], [1.0], 1.0, SolverConfig(step=5e-4))[0].final[0]
    ref = solve_ivp(lambda t, y: [-y[0] ** 2 + 1 / (1 + t), 0], (0, 1), [0.0, 0.0], rtol=1e-12, atol=1e-13).y[0, -1]
    assert abs(v1.final[0] - ref) < 1e-6
    # RK4 is fourth order: the Richardson estimate of the step error is tiny
    assert abs(v1.final[0] - half) / 15 < 1e-6


# -- mass structure -----------------------------------------------------------


def test_constant_mass_flow_equals_frozen_solve():
    spec = simple_spec(SYM, c=0.5, beta=0.5, pis=SWAP)
    flow = MassFlow(0.0)
    field = solve_inhomogeneous_mass(spec, flow, lambda a: spec.local, 2.0, 0.0, 1.0, [1.0, 0.3])
    assert np.max(np.abs(field.final - solve_cumulant(spec, [1.0, 0.3], 1.0).final)) <= 1e-12


def test_mass_scaled_riccati():
    spec = make_mass_structured([[0.0]], 1.0, 0.0, LocalMechanism.uniform(1, 0.0, 1.0))
    field = solve_inhomogeneous_mass(spec, spec.mass_config, None, 2.0, 0.0, 1.0, [1.0])
    assert abs(field.final[0] - 1 / 3) < 1e-6


def test_mass_representation():
    spec = make_mass_structured(SYM, 1.0, math.log(2), LocalMechanism.uniform(2, 0.0, 1.0))
    assert mass_representation_gap(spec, spec.mass_config, None, 1.0, 0.5, 1.0, [1.0, 0.5]) <= 1e-8


def test_mass_solver_rejects_picard():
    spec = make_mass_structured([[0.0]], 1.0, 0.0, LocalMechanism.uniform(1, 0.0, 1.0))
    with pytest.raises(ValidationError):
        solve_inhomogeneous_mass(spec, spec.mass_config, None, 1.0, 0.0, 1.0, [1.0], SolverConfig(method="picard-mild"))


# -- age renewal --------------------------------------------------------------


def test_age_no_reproduction_is_transport_with_killing():
    f = lambda a: 1.0 + a
    grid = solve_age_renewal(0.0, lambda z: z, 2.0, f, 1.0, step=0.01, times=[1.0])
    for a in (0.0, 0.5, 0.99, 1.0, 1.5):
        expected = f(a + 1.0) if a + 1.0 < 2.0 else 0.0
        assert abs(grid.at(1.0, a) - expected) < 1e-12


def test_age_linear_renewal_exponential_growth():
    grid = solve_age_renewal(0.5, lambda z: z, math.inf, 1.0, 1.0)
    assert abs(grid.newborn[-1] - math.exp(0.5)) < 1e-4


def test_age_zero_data():
    grid = solve_age_renewal(0.5, lambda z: 1 - math.exp(-z), 3.0, 0.0, 1.0, step=0.01)
    assert not grid.values.any() and not grid.newborn.any()


def test_age_nonlinear_renewal_matches_ode():
    # constant rate, infinite lifetime: the parent persists, so W' = beta zeta(W) with W(0) = f
    beta = 0.8
    grid = solve_age_renewal(beta, lambda z: -math.expm1(-z), math.inf, 1.0, 1.0, step=1e-3)
    ref = solve_ivp(lambda t, w: [beta * (-math.expm1(-w[0]))], (0, 1), [1.0], rtol=1e-12, atol=1e-13).y[0, -1]
    assert abs(grid.newborn[-1] - ref) < 1e-5
