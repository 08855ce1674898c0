import math
import warnings

import numpy as np
import pytest
from numpy.testing import assert_allclose

from noisereg import duality as D
from noisereg import fields as F
from noisereg import flow as FL
from noisereg import paths as P
from noisereg.grid import Box, Grid


def v0(x):
    return np.exp(-np.sum(np.asarray(x) ** 2, axis=-1))


def v0_grad(x):
    return -2.0 * np.asarray(x) * v0(x)[..., None]


def u0(x):
    return np.exp(-4.0 * np.sum(np.asarray(x) ** 2, axis=-1))


@pytest.fixture
def path():
    return P.sample_brownian(2, 0, P.TimeGrid(0.0, 1.0, 100), 1, 0.5)


def test_forward_particles_follow_tilde_flow(path):
    g = Grid.with_spacing(Box.cube(1, 2.0), 2 ** -4)
    spec = F.mollify(F.catalog_spec("ex1-outward"), 0.2)
    parts = D.forward_particles(u0, spec, None, path, 1.0, g, [50])
    assert parts.steps.tolist() == [0, 50, 100]
    table = FL.solve_flow(spec, g, path)
    assert_allclose(parts.positions[-1] + path.noise()[-1], table.at(1.0), atol=1e-12)
    assert_allclose(parts.masses[-1], parts.initial_mass)


def test_forward_weights_for_constant_rate(path):
    g = Grid.with_spacing(Box.cube(1, 2.0), 2 ** -4)
    parts = D.forward_particles(u0, F.zero_field(1), F.ScalarSpec.constant(1, 0.7), path, 1.0, g, [])
    assert_allclose(parts.masses[-1], parts.initial_mass * math.exp(-0.7), rtol=1e-12)


def test_dual_without_drift_is_shifted_data(path):
    pts = np.linspace(-1, 1, 7)[:, None]
    dv = D.dual_at(F.zero_field(1), None, v0, v0_grad, path, 1.0, 0.3, pts)
    shifted = pts + path.noise()[-1]
    assert_allclose(dv.values, v0(shifted), atol=1e-14)
    assert_allclose(dv.gradients, v0_grad(shifted), atol=1e-14)


def test_dual_gradient_matches_finite_difference(path):
    spec = F.mollify(F.catalog_spec("ex1-outward"), 0.2)
    pts = np.linspace(-1, 1, 9)[:, None] + 0.013
    h = 1e-5
    dv = D.dual_at(spec, None, v0, v0_grad, path, 1.0, 0.0, pts)
    vp = D.dual_at(spec, None, v0, None, path, 1.0, 0.0, pts + h, with_gradient=False).values
    vm = D.dual_at(spec, None, v0, None, path, 1.0, 0.0, pts - h, with_gradient=False).values
    assert_allclose(dv.gradients[:, 0], (vp - vm) / (2 * h), atol=1e-6)


def test_dual_rejects_late_start(path):
    with pytest.raises(ValueError):
        D.dual_at(F.zero_field(1), None, v0, v0_grad, path, 0.5, 0.6, np.zeros((1, 1)))


def test_backward_dual_terminal_value(path):
    g = Grid.with_spacing(Box.cube(1, 2.0), 2 ** -3)
    tl = D.solve_backward_dual(F.zero_field(1), None, v0, 1.0, path, g, times=[1.0])
    assert_allclose(tl.values[0].values, v0(g.flat_points() + path.noise()[-1]), atol=1e-14)


def test_same_drift_closes_exactly(path):
    g = Grid.with_spacing(Box.cube(1, 3.0), 2 ** -6)
    spec = F.mollify(F.catalog_spec("ex1-outward"), 0.1)
    r = D.duality_residual(u0, spec, spec, None, None, v0, v0_grad, path, 1.0, g, n_snap=10)
    assert r.gap == 0.0
    assert abs(r.residual) < 1e-6


def test_linear_drifts_residual_much_smaller_than_gap(path):
    g = Grid.with_spacing(Box.cube(1, 3.0), 2 ** -6)
    a = F.linear_field([[1.0]])
    b = F.linear_field([[0.5]])
    r = D.duality_residual(u0, a, b, None, None, v0, v0_grad, path, 1.0, g, n_snap=100)
    assert abs(r.gap) > 1e-2
    assert abs(r.residual) < 1e-3 * abs(r.gap) + 1e-6


def test_gap_sweep_needs_decreasing_schedule(path):
    g = Grid.with_spacing(Box.cube(1, 1.0), 0.25)
    with pytest.raises(ValueError):
        D.gap_sweep(u0, F.catalog_spec("ex1-outward"), None, [0.1, 0.2], v0, v0_grad, path, 1.0, g)


def test_sweep_bookkeeping():
    s = D.DualitySweep([0.2, 0.1, 0.05], [1.0, 0.6, 0.3], [0, 0, 0], 1.0, "v", "p")
    assert s.decays()
    assert s.inversions() == 0
    s = D.DualitySweep([0.2, 0.1, 0.05], [1.0, 1.2, 0.7], [0, 0, 0], 1.0, "v", "p")
    assert not s.decays()
    assert s.inversions() == 1


def test_gap_shrinks_with_epsilon(path):
    g = Grid.with_spacing(Box.cube(1, 3.0), 2 ** -6)
    spec = F.catalog_spec("ex1-outward")
    sw = D.gap_sweep(u0, spec, None, [0.2, 0.05], v0, v0_grad, path, 1.0, g, n_snap=10)
    assert abs(sw.gaps[1]) < abs(sw.gaps[0])
    assert max(abs(r) for r in sw.residuals) < 5e-3


def test_escape_branch_values():
    assert_allclose(D.escape_branch(0.5)(1.0), [0.25])
    assert_allclose(D.escape_branch(0.5, -1.0)(2.0), [-1.0])


def test_deterministic_branches_both_solve():
    rep = D.uniqueness_experiment("ex1-outward", 0.0)
    assert rep.branch_residuals["null"] == 0.0
    assert rep.branch_residuals["escape"] < 1e-12


def test_stochastic_pipeline_is_reproducible():
    rep = D.uniqueness_experiment("ex1-outward", 1.0, resolutions=(2 ** -3, 2 ** -4), particle_h=2 ** -7)
    assert rep.identical_distance == 0.0
    assert len(rep.distances) == 2
    assert all(0 <= d < 2 for d in rep.distances)


def test_implicit_step_oracle():
    x = np.array([[0.5, 0.0], [0.01, 0.0]])
    dW = np.zeros_like(x)
    beta, dt = 1.0, 0.01
    out = D._implicit_bessel_step(x, dW, beta, dt)
    r = 0.5 * (0.5 + math.sqrt(0.25 - 4 * beta * dt))
    assert_allclose(out[0], [r, 0.0])
    assert r * r - 0.5 * r + beta * dt == pytest.approx(0.0, abs=1e-15)
    assert_allclose(out[1], [0.0, 0.0])


def test_uniform_ball_second_moment():
    x = D._uniform_ball(20_000, 2, 1.0, 0)
    r2 = np.sum(x * x, axis=1)
    assert r2.max() <= 1.0
    assert abs(r2.mean() - 0.5) < 3 * r2.std() / math.sqrt(len(r2))


def test_free_motion_slope_is_dimension():
    rep = D.counterexample_run(0.0, n_paths=2000, d=1, T=0.5, dt=1e-2)
    assert rep.slope_matches(1.0)
    assert rep.collapse_time is None


def test_small_batch_warns():
    with pytest.warns(RuntimeWarning, match="slope SE"):
        rep = D.counterexample_run(1.0, n_paths=50, d=2, dt=1e-2)
    assert "slope SE too large" in rep.warnings


def test_counterexample_parallel_matches_serial():
    a = D.counterexample_run(1.0, n_paths=1000, d=2, dt=1e-2, chunk=250, workers=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        b = D.counterexample_run(1.0, n_paths=1000, d=2, dt=1e-2, chunk=250, workers=2)
    assert a.fitted_slope == b.fitted_slope
    assert a.second_moment == b.second_moment
