import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from noisereg import fields as F
from noisereg import flow as FL
from noisereg import paths as P
from noisereg import transport as T
from noisereg.grid import Box, Grid, GridFunction


def gauss(x, c=0.0, a=1.0):
    return np.exp(-a * np.sum((np.asarray(x) - c) ** 2, axis=-1))


@pytest.fixture
def grid():
    return Grid.with_spacing(Box.cube(1, 4.0), 2 ** -6)


def test_translation_solution(grid):
    path = P.sample_brownian(3, 0, P.TimeGrid(0.0, 1.0, 20), 1, 0.7)
    u0 = grid.sample(gauss)
    sol = T.solve_sgte(u0, None, F.zero_field(1), path, 1.0)
    shifted = gauss(grid.flat_points() - path.noise()[-1])
    inner = np.abs(grid.flat_points()[:, 0]) < 3
    assert_allclose(sol.u.values[inner], shifted[inner], atol=2 * grid.h[0])


def test_constant_rate_decays(grid):
    path = P.sample_brownian(3, 1, P.TimeGrid(0.0, 1.0, 20), 1, 0.5)
    u0 = grid.sample(gauss)
    lam = 0.8
    sol = T.solve_sgte(u0, F.ScalarSpec.constant(1, lam), F.zero_field(1), path, 1.0)
    exact = gauss(grid.flat_points() - path.noise()[-1]) * math.exp(-lam)
    assert_allclose(sol.u.values, exact, atol=1e-3)


def test_exponent_sign_is_minus():
    g = Grid.with_spacing(Box.cube(1, 4.0), 2 ** -6)
    spec = F.mollify(F.catalog_spec("ex1-outward"), 0.2)
    c = F.ScalarSpec.divergence_of(spec)
    path = P.sample_brownian(0, 0, P.TimeGrid(0.0, 0.5, 200), 1, 0.5)
    val = T.validate_exponent_sign(g.sample(gauss), c, spec, path, 0.5,
                                   lambda y: gauss(y, 0.0, 0.5), lambda y: -np.asarray(y) * gauss(y, 0.0, 0.5)[..., None],
                                   n_snap=20)
    assert val.sign == -1.0
    assert val.residual_minus < 1e-3
    assert val.residual_plus > 100 * val.residual_minus


def test_continuity_matches_push_forward():
    spec = F.linear_field([[1.0]])
    c = F.ScalarSpec.divergence_of(spec)
    path = P.sample_brownian(0, 0, P.TimeGrid(0.0, 1.0, 1000), 1, 0.0, deterministic=True)
    out = Grid.with_spacing(Box.cube(1, 4.0), 2 ** -4)
    u0 = lambda x: np.where(np.abs(x[..., 0]) <= 1.0, 0.5, 0.0)
    sol = T.solve_sgte(out.sample(u0), c, spec, path, 1.0).u.values
    nodes = Grid.with_spacing(Box.cube(1, 1.0), 2 ** -10)
    table = FL.solve_flow(spec, nodes, path)
    dens = FL.push_forward(u0, table, 1.0, out).u.values
    inner = np.abs(out.flat_points()[:, 0]) < math.e - 0.2
    assert_allclose(sol[inner], dens[inner], rtol=0.05)
    assert_allclose(sol[inner], 0.5 / math.e, rtol=1e-6)


def test_weighted_norm_gaussian_oracle():
    g = Grid.with_spacing(Box.cube(1, 10.0), 2 ** -7)
    u = g.sample(lambda x: np.exp(-x[..., 0] ** 2 / 2) / math.sqrt(2 * math.pi))
    assert T.weighted_sobolev_norm(u, T.WeightSpec(0.0), 2, 0) == pytest.approx(1 / (2 * math.sqrt(math.pi)), rel=1e-10)
    z = GridFunction(g, np.zeros(g.shape))
    assert T.weighted_sobolev_norm(z, T.WeightSpec(1.0), 2, 1) == 0.0


@settings(max_examples=25, deadline=None)
@given(st.floats(-2, 2), st.floats(0, 2), st.floats(0.1, 3), st.floats(1, 4))
def test_weighted_norm_monotone_and_homogeneous(s, ds, lam, m):
    g = Grid.with_spacing(Box.cube(1, 3.0), 2 ** -4)
    u = g.sample(lambda x: gauss(x, 0.3, 2.0))
    lo = T.weighted_sobolev_norm(u, T.WeightSpec(s), m, 1)
    hi = T.weighted_sobolev_norm(u, T.WeightSpec(s + ds), m, 1)
    assert lo <= hi * (1 + 1e-12)
    scaled = GridFunction(g, lam * u.values)
    assert T.weighted_sobolev_norm(scaled, T.WeightSpec(s), m, 1) == pytest.approx(lam ** m * lo, rel=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.lists(st.floats(-50, 50), min_size=2, max_size=2))
def test_weight_gradient_bound(s, x):
    w = T.WeightSpec(s)
    x = np.array([x])
    lhs = np.linalg.norm(w.gradient(x))
    assert lhs <= 2 * abs(s) * w(x)[0] / (1 + np.linalg.norm(x)) + 1e-12


def test_shock_diagnostic_constant(grid):
    rec = T.shock_diagnostic(GridFunction(grid, np.full(grid.shape, 3.0)))
    assert rec.max_gradient == 0.0


def test_sigma0_shock_grows_at_origin():
    spec = F.catalog_spec("ex2-inward")
    path = P.sample_brownian(0, 0, P.TimeGrid(0.0, 1.0, 10_000), 1, 0.0, deterministic=True)
    grads = []
    for h in (2 ** -6, 2 ** -7):
        g = Grid.with_spacing(Box.cube(1, 2.0), h)
        sol = T.solve_sgte(g.sample(lambda x: gauss(x, 0.25, 8.0)), None, spec, path, 1.0)
        rec = T.shock_diagnostic(sol.u)
        grads.append(rec.max_gradient)
        assert abs(rec.gradient_location[0]) <= h
    assert grads[1] / grads[0] >= 2.0


def test_noisy_gradient_is_refinement_stable():
    spec = F.catalog_spec("ex2-inward")
    path = P.sample_brownian(0, 0, P.TimeGrid(0.0, 1.0, 1000), 1, 0.5)
    grads = []
    for h in (2 ** -6, 2 ** -7):
        g = Grid.with_spacing(Box.cube(1, 4.0), h)
        sol = T.solve_sgte(g.sample(lambda x: gauss(x, 0.25, 8.0)), None, spec, path, 1.0)
        grads.append(T.shock_diagnostic(sol.u).max_gradient)
    assert grads[1] / grads[0] < 1.5


def test_sup_norm_and_constancy(grid):
    spec = F.catalog_spec("ex1-outward")
    path = P.sample_brownian(5, 0, P.TimeGrid(0.0, 1.0, 200), 1, 1.0)
    u0 = grid.sample(lambda x: gauss(x, 0.0, 2.0))
    sol = T.solve_sgte(u0, None, spec, path, 1.0)
    lip = 2 * math.sqrt(2 / math.e) * math.sqrt(2.0)
    assert sol.u.max_abs() <= u0.max_abs() + 2 * lip * grid.h[0]
    const = T.solve_sgte(GridFunction(grid, np.full(grid.shape, 0.7)), None, spec, path, 1.0)
    assert_allclose(const.u.values, 0.7)


def test_renormalization_square(grid):
    spec = F.mollify(F.catalog_spec("ex1-outward"), 0.1)
    path = P.sample_brownian(1, 0, P.TimeGrid(0.0, 1.0, 500), 1, 1.0)
    u0 = grid.sample(lambda x: gauss(x, 0.3))
    a = T.solve_sgte(u0, None, spec, path, 1.0).u.values
    b = T.solve_sgte(GridFunction(grid, u0.values ** 2), None, spec, path, 1.0).u.values
    assert np.max(np.abs(b - a ** 2)) < 3 * 0.25 * grid.h[0] ** 2 * 4


def test_shock_mask_marks_coalescence():
    spec = F.catalog_spec("ex2-inward")
    g = Grid.with_spacing(Box.cube(1, 1.0), 2 ** -5)
    path = P.sample_brownian(0, 0, P.TimeGrid(0.0, 1.0, 1000), 1, 0.0, deterministic=True)
    sol = T.solve_sgte(g.sample(gauss), None, spec, path, 1.0)
    assert sol.shock_mask[np.argmin(np.abs(g.flat_points()[:, 0]))]


def test_monitor_without_drift_is_nonincreasing():
    g = Grid.with_spacing(Box.cube(1, 5.0), 2 ** -5)
    times = [0.0, 0.25, 0.5]
    series = T.apriori_monitor(lambda x: gauss(x), [F.zero_field(1)], [0.1], None, 1.0, 2,
                               T.WeightSpec(0.0), 400, times, g, P.TimeGrid(0.0, 0.5, 50))
    M = series[0].M
    assert M[0] >= M[1] >= M[2]


def test_monitor_rejects_odd_m(grid):
    with pytest.raises(ValueError):
        T.apriori_monitor(gauss, [F.zero_field(1)], [0.1], None, 1.0, 3, T.WeightSpec(0.0), 2,
                          [0.0], grid, P.TimeGrid(0.0, 0.5, 5))


def test_solution_csv(tmp_path, grid):
    path = P.sample_brownian(0, 0, P.TimeGrid(0.0, 1.0, 4), 1, 1.0)
    sol = T.solve_sgte(grid.sample(gauss), None, F.zero_field(1), path, 1.0)
    f = tmp_path / "u.csv"
    T.solution_to_csv(sol, f)
    data = np.loadtxt(f, delimiter=",", skiprows=1)
    assert data.shape == (len(grid.flat_points()), 2)
