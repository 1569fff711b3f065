import numpy as np
import pytest

from fbsde_hjb.bench import meanvar_problem
from fbsde_hjb.policy import FeedbackPolicy
from fbsde_hjb.problem import ProblemSpec, check_assumptions, from_expressions, transform_gamma


def spec_from(**kw):
    base = dict(mu="0", sigma="1", h="0", f="0", phi="x", g_terminal="0", T=1.0, u_lower=-1.0, u_upper=1.0)
    base.update(kw)
    return from_expressions(**base)


def random_inputs(rng, size=50):
    return (rng.uniform(0, 1, size), rng.uniform(-3, 3, size), rng.uniform(-3, 3, size),
            rng.uniform(-3, 3, size), rng.uniform(-1, 1, size))


def test_meanvar_transform_gives_quadratic_running_cost(rng):
    spec = spec_from(g_terminal="x^2", gamma="-y^2")
    tilde = transform_gamma(spec)
    t, x, y, z, u = random_inputs(rng)
    # FD second derivative of -y^2 is exact up to rounding at step 1e-5
    np.testing.assert_allclose(tilde.f(t, x, y, z, u), z * z, rtol=1e-5)
    np.testing.assert_allclose(tilde.g_terminal(x), 0.0, atol=1e-12)
    assert tilde.gamma is None


def test_meanvar_builtin_transform_is_exact(rng):
    tilde = transform_gamma(meanvar_problem())
    t, x, y, z, u = random_inputs(rng)
    np.testing.assert_array_equal(tilde.f(t, x, y, z, u), z * z)
    np.testing.assert_array_equal(tilde.g_terminal(x), 0.0)


def test_zero_gamma_leaves_costs(rng):
    spec = spec_from(f="x*u + z", g_terminal="x^2", gamma="0")
    tilde = transform_gamma(spec)
    t, x, y, z, u = random_inputs(rng)
    np.testing.assert_allclose(tilde.f(t, x, y, z, u), x * u + z, atol=1e-9)
    np.testing.assert_allclose(tilde.g_terminal(x), x * x)


def test_linear_gamma_with_unit_driver(rng):
    spec = spec_from(h="1", g_terminal="x^2", gamma="y")
    tilde = transform_gamma(spec)
    t, x, y, z, u = random_inputs(rng)
    np.testing.assert_allclose(tilde.f(t, x, y, z, u), 1.0, atol=1e-9)
    np.testing.assert_allclose(tilde.g_terminal(x), x * x + x)


def test_transform_keeps_dynamics():
    spec = spec_from(mu="x", gamma="y^2")
    tilde = transform_gamma(spec)
    assert tilde.mu is spec.mu and tilde.sigma is spec.sigma and tilde.h is spec.h and tilde.phi is spec.phi


def test_transform_requires_gamma():
    with pytest.raises(ValueError, match="gamma"):
        transform_gamma(spec_from())


@pytest.mark.parametrize(
    "kw, fragment",
    [
        (dict(T=0.0), "horizon"),
        (dict(u_lower=1.0, u_upper=0.0), "empty"),
        (dict(lipschitz_k=-1.0), "nonnegative"),
    ],
)
def test_spec_validation(kw, fragment):
    with pytest.raises(ValueError, match=fragment):
        spec_from(**kw)


def test_spec_dimension_validation():
    s = spec_from()
    with pytest.raises(ValueError, match="dimension"):
        ProblemSpec(s.mu, s.sigma, s.h, s.f, s.phi, s.g_terminal, 1.0, 0.0, 1.0, n=0)


def test_lipschitz_estimate_of_linear_drift():
    rep = check_assumptions(spec_from(mu="2*x"), budget=10_000, seed=1, c=2.1)
    assert 1.9 <= rep.lipschitz["mu"] <= 2.0 + 1e-12
    assert rep.passes["lipschitz_mu"]


def test_quadratic_terminal_fails_linear_growth():
    rep = check_assumptions(spec_from(phi="x^2"), budget=10_000, seed=1, c=5.0)
    # sup x^2 / (1 + |x|) on |x| <= 10 is 100/11
    assert 5.0 < rep.growth["phi"] <= 100.0 / 11.0 + 1e-12
    assert not rep.passes["growth_phi"]


def test_constant_policy_has_no_variation():
    t = np.linspace(0, 1, 11)
    x = np.linspace(-5, 5, 21)
    pol = FeedbackPolicy.constant(t, x, 0.3, 1.0, -1.0, 1.0)
    rep = check_assumptions(spec_from(), budget=1000, seed=0, policy=pol)
    assert all(v == 0.0 for v in rep.total_variation.values())
    assert rep.sup_u_at_zero == pytest.approx(0.3)


def test_constant_coefficients_are_accepted():
    rep = check_assumptions(spec_from(mu="1", sigma="2"), budget=500, seed=0)
    assert rep.lipschitz["mu"] == 0.0 and rep.lipschitz["sigma"] == 0.0
    assert rep.growth["sigma"] <= 2.0


def test_report_is_deterministic_and_worker_independent():
    spec = spec_from(mu="tanh(x)", h="z*u + y")
    a = check_assumptions(spec, budget=5000, seed=7)
    b = check_assumptions(spec, budget=5000, seed=7, workers=3)
    assert a.lipschitz == b.lipschitz and a.growth == b.growth
    c = check_assumptions(spec, budget=5000, seed=8)
    assert c.lipschitz != a.lipschitz


def test_estimates_are_finite_and_nonnegative():
    rep = check_assumptions(spec_from(mu="x*u", h="tanh(z) + y"), budget=2000, seed=3)
    for d in (rep.lipschitz, rep.growth):
        assert all(np.isfinite(v) and v >= 0 for v in d.values())


def test_budget_minimum():
    with pytest.raises(ValueError, match="budget"):
        check_assumptions(spec_from(), budget=99)
