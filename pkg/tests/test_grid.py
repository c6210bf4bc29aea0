import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from ekhomog.errors import GridMismatch, InconsistentRhs
from ekhomog.geometry import Microstructure, DisperseParams, voxelize
from ekhomog.grid import (MacGrid, QuasiDefiniteSolver, fsum_dot, read_field, solve_spd, solve_stokes,
                          write_field)


def _disk_grid(n=32, r=0.25):
    micro = Microstructure(1.0, [[0.5, 0.5]], [r], "poisson-voronoi", 0, DisperseParams(delta_min=0.2))
    return voxelize(micro, n)


def _random_mask(seed, n=16, p=0.25):
    rng = np.random.default_rng(seed)
    return rng.random((n, n)) > p


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6), periodic=st.booleans())
def test_discrete_adjointness(seed, periodic):
    g = MacGrid(_random_mask(seed), 1 / 16, periodic=periodic)
    rng = np.random.default_rng(seed + 1)
    s = g.scalar(rng.standard_normal(g.n_fluid))
    v = g.vector(rng.standard_normal(g.n_open))
    lhs = fsum_dot(g.div(v).fluid_values(), s.fluid_values())
    rhs = -fsum_dot(v.open_values(), g.grad(s).open_values())
    assert abs(lhs - rhs) <= 1e-13 * max(1.0, abs(lhs))


def test_solid_entries_stay_zero():
    g = MacGrid(_random_mask(3), 1 / 16)
    s = g.scalar(np.ones(g.n_fluid))
    assert np.all(s.values.ravel()[~g.cell_mask.ravel()] == 0)
    v = g.grad(s)
    closed = np.setdiff1d(np.arange(g.n_faces), g.open_faces)
    assert np.all(v.face_values()[closed] == 0)


def test_lap_of_constant_vanishes():
    g = MacGrid(np.ones((16, 16), bool), 1 / 16)
    np.testing.assert_allclose(g.lap(g.scalar(np.full(g.n_fluid, 3.0))).fluid_values(), 0.0, atol=1e-10)


@pytest.mark.parametrize("L", [1.0, 2.0])
def test_lap_of_sine_second_order(L):
    errs = []
    for n in (32, 64):
        g = MacGrid(np.ones((n, n), bool), L / n)
        x = (np.arange(n) + 0.5) * L / n
        f = np.tile(np.sin(2 * np.pi * x / L), (n, 1)).ravel()
        exact = -(2 * np.pi / L) ** 2 * f
        errs.append(np.abs(g.lap(g.scalar(f)).fluid_values() - exact).max())
    assert math.log2(errs[0] / errs[1]) > 1.9


def test_translation_commutes_on_all_fluid_torus():
    n = 16
    g = MacGrid(np.ones((n, n), bool), 1 / n)
    rng = np.random.default_rng(0)
    f = rng.standard_normal((n, n))
    a = g.lap(g.scalar(f.ravel())).values
    b = g.lap(g.scalar(np.roll(f, 1, axis=1).ravel())).values
    np.testing.assert_allclose(np.roll(a, 1, axis=1), b, atol=1e-9)


def test_grid_mismatch():
    a, b = MacGrid(np.ones((8, 8), bool), 1 / 8), MacGrid(np.ones((8, 8), bool), 1 / 16)
    with pytest.raises(GridMismatch):
        a.scalar(np.ones(64)).inner(b.scalar(np.ones(64)))


def test_solve_spd_zero_rhs_and_dense_oracle():
    g = MacGrid(np.ones((16, 16), bool), 1 / 16)
    A = g.laplacian
    x, rep = solve_spd(A, np.zeros(g.n_fluid), singular=True)
    assert not x.any() and rep.iterations == 0
    rng = np.random.default_rng(2)
    b = rng.standard_normal(g.n_fluid)
    b -= b.mean()
    x, rep = solve_spd(A, b, singular=True)
    dense = np.linalg.lstsq(A.toarray(), b, rcond=None)[0]
    dense -= dense.mean()
    np.testing.assert_allclose(x, dense, atol=1e-8 * np.abs(dense).max())
    assert rep.residual <= 1e-9


def test_solve_spd_inconsistent_rhs():
    g = MacGrid(np.ones((8, 8), bool), 1 / 8)
    with pytest.raises(InconsistentRhs):
        solve_spd(g.laplacian, np.ones(g.n_fluid), singular=True)


def test_cg_residuals_nonincreasing_in_energy_norm():
    g = MacGrid(np.ones((16, 16), bool), 1 / 16)
    A = g.laplacian + sp.identity(g.n_fluid)
    b = np.random.default_rng(5).standard_normal(g.n_fluid)
    xstar = np.linalg.solve(A.toarray(), b)
    errs = []
    solve_spd(A, b, preconditioner=None, callback=lambda xk: errs.append(float((xk - xstar) @ (A @ (xk - xstar)))))
    assert all(b2 <= b1 * (1 + 1e-12) for b1, b2 in zip(errs, errs[1:]))


def test_stokes_zero_force():
    g = _disk_grid()
    v, p, rep = solve_stokes(g, np.zeros(g.n_open))
    assert not v.open_values().any() and not p.fluid_values().any()


@pytest.mark.parametrize("method", ["direct", "uzawa"])
def test_stokes_matches_dense_saddle(method):
    g = _disk_grid(32)
    f = g.constant_force((1.0, 0.0))
    v, p, rep = solve_stokes(g, f, method=method)
    vd, pd, _ = solve_stokes(g, f, method="dense")
    np.testing.assert_allclose(v.open_values(), vd.open_values(), atol=1e-8 * np.abs(vd.open_values()).max())
    assert np.abs(g.D @ v.open_values()).max() <= 1e-9 * np.abs(f).max()


def test_stokes_gradient_force_is_absorbed_by_pressure():
    g = _disk_grid(32)
    rng = np.random.default_rng(7)
    q = rng.standard_normal(g.n_fluid)
    f = g.constant_force((0.0, 1.0))
    v1, p1, _ = solve_stokes(g, f)
    v2, p2, _ = solve_stokes(g, f + g.G @ q)
    np.testing.assert_allclose(v2.open_values(), v1.open_values(), atol=1e-9 * np.abs(v1.open_values()).max())
    np.testing.assert_allclose(p2.fluid_values() - p1.fluid_values(), q - q.mean(), atol=1e-7)


def test_quasi_definite_solver_on_random_saddle():
    rng = np.random.default_rng(1)
    n, m = 40, 10
    M = rng.standard_normal((n, n))
    A = M @ M.T + n * np.eye(n)
    B = rng.standard_normal((n, m))
    K = sp.csr_matrix(np.block([[A, B], [B.T, np.zeros((m, m))]]))
    b = rng.standard_normal(n + m)
    x, rep = QuasiDefiniteSolver(K, np.r_[np.zeros(n), -np.ones(m)]).solve(b, tol=1e-12)
    np.testing.assert_allclose(x, np.linalg.solve(K.toarray(), b), rtol=1e-9, atol=1e-11)


@pytest.mark.parametrize("periodic", [True, False])
def test_field_roundtrip(tmp_path, periodic):
    g = MacGrid(_random_mask(4), 1 / 16, periodic=periodic)
    rng = np.random.default_rng(0)
    s, v = g.scalar(rng.standard_normal(g.n_fluid)), g.vector(rng.standard_normal(g.n_open))
    write_field(tmp_path / "s", s, config_hash="h1")
    write_field(tmp_path / "v", v)
    hs, (vals,) = read_field(tmp_path / "s")
    assert hs["kind"] == "scalar" and hs["config_hash"] == "h1"
    np.testing.assert_array_equal(vals, s.values)
    hv, (u, w) = read_field(tmp_path / "v")
    assert u.shape == (16, 17) and w.shape == (17, 16)
    if periodic:
        np.testing.assert_array_equal(u[:, :-1], v.u)
        np.testing.assert_array_equal(u[:, -1], v.u[:, 0])
    else:
        np.testing.assert_array_equal(u, v.u)
