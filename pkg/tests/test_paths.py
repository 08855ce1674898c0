import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from noisereg import fields as F
from noisereg import paths as P


def test_time_grid_basics():
    g = P.TimeGrid(0.0, 1.0, 4)
    assert g.dt == 0.25
    assert_allclose(g.times, [0, 0.25, 0.5, 0.75, 1.0])
    assert g.index_of(0.5) == 2
    with pytest.raises(ValueError):
        g.index_of(0.3)
    with pytest.raises(ValueError):
        P.TimeGrid(1.0, 1.0, 3)


def test_normals_frozen_stream():
    assert_allclose(P._normals(0, 0, 3), [-2.271884148324594, -0.701327920628698, -1.218980191079758],
                    rtol=0, atol=0)
    assert_allclose(P._normals(12345, 7, 2), [-1.741977183273001, -0.4337438216651201], rtol=0, atol=0)


def test_sigma_zero_needs_flag():
    g = P.TimeGrid(0.0, 1.0, 10)
    with pytest.raises(ValueError):
        P.sample_brownian(0, 0, g, 1, 0.0)
    path = P.sample_brownian(0, 0, g, 2, 0.0, deterministic=True)
    assert np.all(path.values == 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 63), st.integers(0, 2 ** 40), st.integers(1, 3))
def test_sampling_is_reproducible(seed, stream, d):
    g = P.TimeGrid(0.0, 1.0, 16)
    a = P.sample_brownian(seed, stream, g, d, 1.0)
    b = P.sample_brownian(seed, stream, g, d, 1.0)
    assert np.array_equal(a.values, b.values)
    assert np.all(a.values[0] == 0)


def test_batch_matches_single_paths():
    g = P.TimeGrid(0.0, 1.0, 8)
    batch = P.sample_batch(3, [5, 1, 9], g, 2, 0.7)
    for k, sid in enumerate([5, 1, 9]):
        assert np.array_equal(batch.values[k], P.sample_brownian(3, sid, g, 2, 0.7).values)


def test_terminal_variance():
    g = P.TimeGrid(0.0, 2.0, 4)
    n = 10_000
    batch = P.sample_batch(1, range(n), g, 1, 1.0)
    z = batch.values[:, -1, 0] / math.sqrt(g.T)
    var = z.var(ddof=1)
    se = math.sqrt(2.0 / (n - 1))
    assert abs(var - 1.0) < 3 * se
    assert abs(z.mean()) < 3 / math.sqrt(n)


def test_stream_independence():
    g = P.TimeGrid(0.0, 1.0, 2)
    n = 10_000
    a = P.sample_batch(0, range(n), g, 1, 1.0).values[:, -1, 0]
    b = P.sample_batch(0, range(n, 2 * n), g, 1, 1.0).values[:, -1, 0]
    assert abs(np.corrcoef(a, b)[0, 1]) < 4 / math.sqrt(n)


def test_reverse_properties():
    g = P.TimeGrid(0.0, 1.0, 10)
    path = P.sample_brownian(2, 0, g, 1, 1.0)
    back = P.reverse(path, 0.6)
    assert np.all(back.values[6] == 0)
    assert_allclose(np.diff(back.values, axis=0), np.diff(path.values, axis=0))
    assert np.array_equal(P.reverse(path, 0.0).values, path.values)
    with pytest.raises(ValueError):
        P.reverse(path, 0.55)


def test_backward_increment_variance():
    g = P.TimeGrid(0.0, 1.0, 20)
    batch = P.sample_batch(4, range(5000), g, 1, 1.0)
    inc = []
    for k in range(200):
        back = P.reverse(batch.path(k), 1.0)
        inc.append(back.values[:-1] - back.values[1:])
    inc = np.concatenate(inc).ravel()
    se = g.dt * math.sqrt(2.0 / len(inc))
    assert abs(inc.var() - g.dt) < 3 * se


def test_reversal_involution():
    g = P.TimeGrid(0.0, 1.0, 10)
    path = P.sample_brownian(8, 3, g, 1, 1.0)
    re = P.rebase(P.reverse(path, 1.0))
    again = P.rebase(P.reverse(re, re.grid.T))
    assert_allclose(again.increments(), path.increments(), atol=1e-15)


def test_tilde_field_examples():
    g = P.TimeGrid(0.0, 1.0, 4)
    x = np.linspace(-2, 2, 9)[:, None]
    spec = F.catalog_spec("ex1-outward")
    zero = P.sample_brownian(0, 0, g, 1, 0.0, deterministic=True)
    tf = P.tilde_field(spec, zero)
    assert np.array_equal(tf(0.5, x), spec(0.5, x))
    const = F.constant_field([2.0])
    tf = P.tilde_field(const, P.sample_brownian(0, 0, g, 1, 1.0))
    assert_allclose(tf(0.75, x), 2.0)
    frozen = P.frozen_path(g, [1.0], sigma=0.25)
    tf = P.tilde_field(spec, frozen)
    assert_allclose(tf(0.25, np.array([[0.0]])), [[0.25 ** 0.5]])
    with pytest.raises(ValueError):
        tf(0.3, x)


def test_csv_roundtrip(tmp_path):
    g = P.TimeGrid(0.0, 1.0, 7)
    path = P.sample_brownian(5, 2, g, 2, 1.0)
    f = tmp_path / "w.csv"
    P.path_to_csv(path, f)
    back = P.path_from_csv(f)
    assert np.array_equal(back.values, path.values)
    assert back.grid.n_steps == 7
