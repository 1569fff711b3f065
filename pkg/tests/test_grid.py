import math

import numpy as np
import pytest

from fbsde_hjb.errors import CFLError, NonFiniteError
from fbsde_hjb.grid import (
    GridSpec,
    ScalarField,
    d1_upwind,
    d2_central,
    read_field_csv,
    solve_g,
    write_field_csv,
)
from fbsde_hjb.policy import FeedbackPolicy
from fbsde_hjb.problem import from_expressions


def problem(mu="0", sigma="0.5", h="0", phi="x", T=1.0):
    return from_expressions(mu=mu, sigma=sigma, h=h, f="0", phi=phi, g_terminal="0", T=T, u_lower=0.0, u_upper=1.0)


def zero_policy(grid):
    return FeedbackPolicy.constant(grid.t, grid.x, 0.0, 1.0, 0.0, 1.0)


def test_grid_validation():
    with pytest.raises(ValueError, match="grid too small"):
        GridSpec(0.0, 1.0, 2, 10, 0.0, 1.0)
    with pytest.raises(ValueError):
        GridSpec(1.0, 0.0, 11, 10, 0.0, 1.0)
    with pytest.raises(ValueError):
        GridSpec(0.0, 1.0, 11, 0, 0.0, 1.0)
    with pytest.raises(ValueError):
        GridSpec(0.0, 1.0, 11, 10, 1.0, 1.0)


def test_grid_geometry():
    g = GridSpec(-1.0, 1.0, 5, 4, 0.0, 2.0)
    assert g.dx == 0.5 and g.dt == 0.5
    np.testing.assert_array_equal(g.x, [-1.0, -0.5, 0.0, 0.5, 1.0])
    np.testing.assert_array_equal(g.inner_mask(0.5), [False, True, True, True, False])


def test_upwind_direction():
    w = np.array([0.0, 1.0, 4.0, 9.0])
    np.testing.assert_array_equal(d1_upwind(w, 1.0, 1.0), [1.0, 3.0, 5.0, 5.0])
    np.testing.assert_array_equal(d1_upwind(w, -1.0, 1.0), [1.0, 1.0, 3.0, 5.0])


def test_second_difference_exact_on_quadratic():
    x = np.linspace(-1, 1, 9)
    np.testing.assert_allclose(d2_central(3 * x**2 + x, x[1] - x[0]), 6.0, rtol=1e-12)


@pytest.mark.parametrize("scheme", ["explicit", "implicit"])
def test_affine_terminal_is_preserved(scheme):
    grid = GridSpec(-2.0, 2.0, 41, 100, 0.0, 1.0)
    g, z = solve_g(problem(phi="2*x + 1"), zero_policy(grid), grid, scheme)
    np.testing.assert_allclose(g.values, np.broadcast_to(2 * grid.x + 1, g.values.shape), atol=1e-12)
    np.testing.assert_allclose(z.values, np.full(z.values.shape, 0.5 * 2.0), atol=1e-12)


@pytest.mark.parametrize("scheme", ["explicit", "implicit"])
def test_heat_equation_quadratic_is_exact(scheme):
    # g = x^2 + sigma^2 (T - t) solves g_t + sigma^2/2 g_xx = 0
    grid = GridSpec(-2.0, 2.0, 41, 200, 0.0, 1.0)
    g, _ = solve_g(problem(phi="x^2"), zero_policy(grid), grid, scheme)
    exact = grid.x[None, :] ** 2 + 0.25 * (1.0 - grid.t[:, None])
    np.testing.assert_allclose(g.values, exact, atol=1e-12)


def test_constant_driver_accumulates():
    grid = GridSpec(-1.0, 1.0, 21, 50, 0.0, 1.0)
    g, _ = solve_g(problem(h="3", phi="x"), zero_policy(grid), grid)
    np.testing.assert_allclose(g.values, grid.x[None, :] + 3.0 * (1.0 - grid.t[:, None]), atol=1e-12)


def test_linear_driver_in_y_matches_exponential_growth():
    # g_t + a g = 0 with g(T) = 1 gives g = exp(a (T - t)); explicit Euler converges at O(dt)
    grid = GridSpec(-1.0, 1.0, 11, 2000, 0.0, 1.0)
    g, _ = solve_g(problem(h="0.5*y", phi="1"), zero_policy(grid), grid)
    assert g.values[0, 5] == pytest.approx(math.exp(0.5), rel=1e-3)


def test_explicit_and_implicit_agree_on_advection_diffusion():
    spec = problem(mu="0.3*x", sigma="0.4", phi="tanh(x)")
    grid = GridSpec(-3.0, 3.0, 121, 400, 0.0, 1.0)
    ge, _ = solve_g(spec, zero_policy(grid), grid, "explicit")
    gi, _ = solve_g(spec, zero_policy(grid), grid, "implicit")
    inner = grid.inner_mask(0.6)
    assert np.max(np.abs(ge.values[0, inner] - gi.values[0, inner])) < 5e-3


def test_cfl_violation_raises():
    grid = GridSpec(-1.0, 1.0, 201, 10, 0.0, 1.0)
    with pytest.raises(CFLError, match="CFL"):
        solve_g(problem(), zero_policy(grid), grid)
    solve_g(problem(), zero_policy(grid), grid, "implicit")


def test_non_finite_terminal_reported():
    grid = GridSpec(-1.0, 1.0, 21, 100, 0.0, 1.0)
    with pytest.raises(NonFiniteError) as info:
        solve_g(problem(phi="log(x)"), zero_policy(grid), grid)
    assert info.value.where == (100, 0)


def test_policy_must_cover_grid():
    grid = GridSpec(-1.0, 1.0, 21, 100, 0.0, 1.0)
    short = FeedbackPolicy.constant([0.0, 0.5], grid.x, 0.0, 1.0, 0.0, 1.0)
    with pytest.raises(ValueError, match="cover"):
        solve_g(problem(), short, grid)


def test_field_interpolation():
    grid = GridSpec(0.0, 1.0, 3, 2, 0.0, 1.0)
    field = ScalarField(grid, np.array([[0.0, 1.0, 2.0], [1.0, 2.0, 3.0], [2.0, 3.0, 4.0]]))
    assert field.at(0.25, 0.25) == pytest.approx(1.0)
    assert field.at(1.0, 1.0) == 4.0
    assert field.at(0.0, 5.0) == 2.0  # clamped in x


def test_csv_round_trip_is_exact(tmp_path, rng):
    grid = GridSpec(-1.3, 2.7, 17, 9, 0.1, 1.7)
    vals = rng.standard_normal((10, 17))
    path = tmp_path / "f.csv"
    write_field_csv(path, grid, vals)
    assert path.read_text().splitlines()[0] == "t,x,value"
    back = read_field_csv(path)
    np.testing.assert_array_equal(back.values, vals)
    assert back.grid.nx == 17 and back.grid.nt == 9
    assert back.grid.dx == pytest.approx(grid.dx, rel=1e-14)
