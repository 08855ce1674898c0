import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from noisereg import fields as F
from noisereg import flow as FL
from noisereg import paths as P
from noisereg.grid import Box, Grid


def _zero_path(T=1.0, n=1000, d=1):
    return P.sample_brownian(0, 0, P.TimeGrid(0.0, T, n), d, 0.0, deterministic=True)


@pytest.mark.parametrize("scheme", FL.SCHEMES)
def test_zero_drift_is_pure_noise(scheme):
    path = P.sample_brownian(1, 0, P.TimeGrid(0.0, 1.0, 50), 2, 0.8)
    traj = FL.integrate(F.zero_field(2), [0.3, -0.2], path, scheme)
    assert_allclose(traj.states, np.array([0.3, -0.2]) + path.noise(), atol=1e-14)


def test_exponential_oracle():
    traj = FL.integrate(F.linear_field([[1.0]]), [1.0], _zero_path(n=10_000))
    assert abs(traj.final[0] - math.e) < 1e-6


def test_scheme_orders_on_exponential():
    spec = F.linear_field([[1.0]])
    err = {}
    for scheme in FL.SCHEMES:
        e = [abs(FL.integrate(spec, [1.0], _zero_path(n=n), scheme).final[0] - math.e) for n in (100, 200)]
        err[scheme] = e[0] / e[1]
    assert err["tilde_rk2"] >= 3.5
    assert err["euler_maruyama"] >= 1.9


def test_example1_closed_form():
    path = _zero_path(n=10_000)
    traj = FL.integrate(F.catalog_spec("ex1-outward"), [0.5], path)
    exact = FL.power_trajectory(0.5, path.grid.times, 0.5, 1.0)
    assert np.max(np.abs(traj.states[:, 0] - exact)) < 1e-5


def test_power_trajectory_values():
    assert_allclose(FL.power_trajectory(0.5, [0.0, 1.0], 0.5, 1.0), [0.5, 1.5131802525], rtol=1e-8)
    assert_allclose(FL.power_trajectory(0.25, [0.5, 1.0, 2.0], 0.5, -1.0), [0.0625, 0.0, 0.0])
    assert_allclose(FL.power_trajectory(-0.25, [0.5], 0.5, -1.0), [-0.0625])


def test_escape_is_flagged_not_raised():
    spec = F.linear_field([[5.0]])
    traj = FL.integrate(spec, [1.0], _zero_path(T=3.0, n=300))
    assert traj.escaped


def test_flow_initial_condition_and_identity_jacobian():
    spec = F.mollify(F.catalog_spec("ex1-outward"), 0.1)
    g = Grid.with_spacing(Box.cube(1, 1.0), 0.125)
    path = P.sample_brownian(0, 0, P.TimeGrid(0.0, 0.5, 50), 1, 1.0)
    table = FL.solve_flow(spec, g, path, with_jacobian=True, store_every=1)
    assert np.array_equal(table.positions[0], g.flat_points())
    assert_allclose(table.jacobians[0], np.broadcast_to(np.eye(1), table.jacobians[0].shape))


def test_flow_jacobian_needs_smooth_drift():
    g = Grid.with_spacing(Box.cube(1, 1.0), 0.25)
    with pytest.raises(ValueError, match="Jacobian needs mollified drift"):
        FL.solve_flow(F.catalog_spec("ex1-outward"), g, _zero_path(n=10), with_jacobian=True)


def test_translation_flow():
    g = Grid.with_spacing(Box.cube(2, 1.0), 0.5)
    path = P.sample_brownian(4, 0, P.TimeGrid(0.0, 1.0, 20), 2, 1.0)
    table = FL.solve_flow(F.zero_field(2), g, path, with_jacobian=True)
    assert_allclose(table.at(1.0), g.flat_points() + path.noise()[-1], atol=1e-14)
    assert_allclose(table.jacobians[-1], np.broadcast_to(np.eye(2), table.jacobians[-1].shape))


def test_rotation_preserves_volume():
    g = Grid.with_spacing(Box.cube(2, 1.0), 0.5)
    table = FL.solve_flow(F.rotation_field(), g, _zero_path(T=1.0, n=2000, d=2), with_jacobian=True)
    dets = np.linalg.det(table.jacobians[-1])
    assert np.max(np.abs(dets - 1.0)) < 1e-6


def test_example2_coalescence():
    g = Grid.with_spacing(Box.cube(1, 1.0), 2 ** -5)
    path = _zero_path(T=2.0, n=4000)
    table = FL.solve_flow(F.catalog_spec("ex2-inward"), g, path, store_every=1)
    for j, x in enumerate(g.flat_points()[:, 0]):
        if 0 < abs(x) < 1:
            t_hit = abs(x) ** 0.5 / 0.5
            k = int(math.ceil(t_hit / path.grid.dt))
            assert abs(table.positions[min(k, len(table.times) - 1), j, 0]) < g.h[0]


def test_jacobian_matches_finite_differences():
    spec = F.mollify(F.catalog_spec("ex1-outward"), 0.1)
    path = P.sample_brownian(2, 0, P.TimeGrid(0.0, 0.5, 500), 1, 1.0)
    errs = []
    for h in (2 ** -5, 2 ** -6):
        g = Grid.with_spacing(Box.cube(1, 1.5), h)
        table = FL.solve_flow(spec, g, path, with_jacobian=True)
        fd = FL.finite_difference_jacobian(table, 0.5)
        errs.append(np.max(np.abs(fd - table.jacobians[-1])[1:-1]))
    assert errs[1] < errs[0]
    assert errs[1] < 2 ** -6


def test_flow_table_determinism_and_roundtrip(tmp_path):
    spec = F.mollify(F.catalog_spec("ex1-outward"), 0.2)
    g = Grid.with_spacing(Box.cube(1, 1.0), 0.25)
    path = P.sample_brownian(9, 1, P.TimeGrid(0.0, 0.5, 40), 1, 1.0)
    a = FL.solve_flow(spec, g, path, with_jacobian=True, store_every=10)
    b = FL.solve_flow(spec, g, path, with_jacobian=True, store_every=10)
    assert np.array_equal(a.positions, b.positions)
    f = tmp_path / "flow.bin"
    a.save(f)
    c = FL.FlowTable.load(f)
    assert np.array_equal(c.positions, a.positions)
    assert_allclose(c.times, a.times)
    header = np.fromfile(f, dtype=np.int64, count=3)
    assert header.tolist() == [1, len(g.flat_points()), len(a.times)]


def test_inverse_of_translation():
    g = Grid.with_spacing(Box.cube(1, 2.0), 0.125)
    path = P.sample_brownian(1, 0, P.TimeGrid(0.0, 1.0, 10), 1, 0.5)
    table = FL.solve_flow(F.zero_field(1), g, path)
    q = np.linspace(-1, 1, 9)[:, None]
    inv = FL.inverse_flow(table, 1.0, q)
    assert_allclose(inv.preimages, q - path.noise()[-1], atol=1e-12)


def test_inverse_of_exponential_flow():
    g = Grid.with_spacing(Box.cube(1, 2.0), 2 ** -6)
    table = FL.solve_flow(F.linear_field([[1.0]]), g, _zero_path(n=1000))
    q = np.linspace(-2, 2, 11)[:, None]
    inv = FL.inverse_flow(table, 1.0, q)
    assert_allclose(inv.preimages, q * math.exp(-1), atol=1e-3)
    assert inv.composition_residual < 2 * g.h[0]


def test_inverse_in_two_dimensions():
    g = Grid.with_spacing(Box.cube(2, 1.0), 0.125)
    table = FL.solve_flow(F.rotation_field(), g, _zero_path(T=0.5, n=500, d=2))
    inv = FL.inverse_flow(table, 0.5, np.array([[0.1, 0.2], [-0.3, 0.1]]))
    assert inv.composition_residual < 2 * 0.125


def test_inverse_warns_on_coalescence():
    g = Grid.with_spacing(Box.cube(1, 1.0), 2 ** -5)
    table = FL.solve_flow(F.catalog_spec("ex2-inward"), g, _zero_path(T=1.0, n=1000))
    with pytest.warns(RuntimeWarning, match="not monotone"):
        inv = FL.inverse_flow(table, 1.0, np.array([[0.0], [0.5]]))
    assert inv.set_valued[0]
    assert not inv.set_valued[1]


def test_push_forward_translation_keeps_mass():
    g = Grid.with_spacing(Box.cube(1, 4.0), 2 ** -5)
    path = P.BrownianPath(P.TimeGrid(0.0, 1.0, 1), [[0.0], [1.0]], 1.0)
    table = FL.solve_flow(F.zero_field(1), g, path)
    u0 = lambda x: np.exp(-4 * x[..., 0] ** 2)
    dens = FL.push_forward(u0, table, 1.0)
    assert dens.mass + dens.lost_mass == pytest.approx(np.sum(u0(g.flat_points())) * g.cell_volume, rel=1e-12)
    assert_allclose(dens.u.values, u0(g.flat_points() - 1.0), atol=1e-12)


def test_push_forward_exponential_height():
    g = Grid.with_spacing(Box.cube(1, 1.0), 2 ** -10)
    out = Grid.with_spacing(Box.cube(1, 4.0), 2 ** -4)
    table = FL.solve_flow(F.linear_field([[1.0]]), g, _zero_path(n=1000))
    dens = FL.push_forward(lambda x: np.full(x.shape[0], 0.5), table, 1.0, out)
    inner = np.abs(out.flat_points()[:, 0]) < math.e - 0.2
    assert_allclose(dens.u.values[inner], 0.5 / math.e, rtol=0.05)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000), st.floats(0.1, 2.0))
def test_mass_conservation(seed, sigma):
    g = Grid.with_spacing(Box.cube(1, 2.0), 2 ** -4)
    path = P.sample_brownian(seed, 0, P.TimeGrid(0.0, 1.0, 50), 1, sigma)
    table = FL.solve_flow(F.catalog_spec("ex1-outward"), g, path)
    u0 = lambda x: np.exp(-x[..., 0] ** 2)
    dens = FL.push_forward(u0, table, 1.0, Grid.with_spacing(Box.cube(1, 3.0), 2 ** -4))
    m0 = np.sum(u0(g.flat_points())) * g.cell_volume
    assert abs(dens.mass + dens.lost_mass - m0) < 1e-10 * m0


def test_concentration_of_uniform_density():
    g = Grid.with_spacing(Box.cube(1, 1.0), 2 ** -6)
    dens = FL.deposit(g.flat_points(), np.full(len(g.flat_points()), 0.5 * g.cell_volume), g)
    rec = FL.concentration_diagnostic(dens, 2.0)
    assert rec.max_cell_density == pytest.approx(0.5)
    assert rec.lm_norm == pytest.approx(0.5 * (2 + g.h[0]) ** 0.5, rel=1e-12)


def test_example2_mass_collapses_to_one_cell():
    parts = Grid.with_spacing(Box.cube(1, 1.0), 2 ** -10).flat_points()
    mass = np.full(len(parts), 2 ** -11)
    path = P.sample_brownian(0, 0, P.TimeGrid.with_step(2.1, 0.005), 1, 0.0, deterministic=True)
    res = FL.integrate_batch(F.catalog_spec("ex2-inward"), parts, path.noise()[None], path.grid)
    g = Grid.with_spacing(Box.cube(1, 4.0), 2 ** -6)
    dens = FL.deposit(res.positions[-1, 0], mass, g)
    assert dens.u.values.max() * g.cell_volume >= 0.99 * dens.mass
    assert FL.concentration_diagnostic(dens).near_zero_mass_fraction >= 0.99
