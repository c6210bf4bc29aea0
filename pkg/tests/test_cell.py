import numpy as np
import pytest

from ekhomog.cell import CellSystem, cell_residuals, solve_all_cells, solve_pressure_family, solve_species_family
from ekhomog.geometry import DisperseParams, Microstructure, generate_perturbed_lattice, voxelize
from ekhomog.grid import solve_stokes
from ekhomog.model import ElectrolyteSpec, SurfaceCharge
from ekhomog.pb import solve_equilibrium

WIDE = DisperseParams(delta_min=0.125)
BINARY = ElectrolyteSpec((-1, 1), (0.5, 0.5), (1.0, 1.0), 1.0, 1.0)
TERNARY = ElectrolyteSpec((-2, -1, 1), (0.1, 0.2, 0.4), (1.0, 0.5, 2.0), 2.0, 1.0)


def _setup(spec, sigma, n=32, L=1, seed=2):
    micro = generate_perturbed_lattice(L, amplitude=0.1, radius_range=(0.3, 0.35), seed=seed, constraints=WIDE)
    grid = voxelize(micro, n)
    return grid, solve_equilibrium(grid, spec, SurfaceCharge("constant", sigma))


@pytest.fixture(scope="module")
def charged():
    grid, eq = _setup(TERNARY, 0.3, n=64, L=2)
    system = CellSystem(eq, grid, TERNARY)
    sols, _ = solve_all_cells(eq, grid, TERNARY, system=system)
    return grid, eq, system, sols


def test_zero_drive_gives_zero_fields(charged):
    grid, eq, system, _ = charged
    sol = system.solve(1, 2, drive=0.0)
    assert not sol.v.open_values().any()
    assert not sol.pi.fluid_values().any()
    assert all(not t.fluid_values().any() for t in sol.theta)


@pytest.mark.parametrize("family, k", [(0, 1), (2, 2), (3, 1)])
def test_linearity(charged, family, k):
    grid, eq, system, sols = charged
    twice = system.solve(family, k, drive=2.0)
    one = sols[(family, k)]
    np.testing.assert_allclose(twice.v.open_values(), 2 * one.v.open_values(),
                               atol=1e-9 * np.abs(one.v.open_values()).max())
    for a, b in zip(twice.theta, one.theta):
        np.testing.assert_allclose(a.fluid_values(), 2 * b.fluid_values(), atol=1e-9 * max(np.abs(b.fluid_values()).max(), 1e-300))


def test_residuals_and_leakage(charged):
    grid, eq, system, sols = charged
    for sol in sols.values():
        r = cell_residuals(sol, eq, grid, TERNARY, system)
        assert r["combined"] <= 1e-9
        assert r["wall_leakage"] <= 1e-10
        assert r["energy"] <= 1e-9
        for t in sol.theta:
            assert abs(t.fluid_values().mean()) <= 1e-12 * max(np.abs(t.fluid_values()).max(), 1.0)
        assert abs(grid.D @ sol.v.open_values()).max() <= 1e-9 * max(np.abs(sol.v.open_values()).max(), 1e-300) * 1e3


def test_noise_raises_momentum_residual(charged):
    grid, eq, system, sols = charged
    sol = sols[(0, 1)]
    noisy = system.vector_of(sol).copy()
    rng = np.random.default_rng(0)
    noisy[: grid.n_open] += 1e-3 * rng.standard_normal(grid.n_open)
    r = system.residuals(sol, x=noisy)
    assert r["momentum"] > 1e-4


def test_reciprocal_pairing(charged):
    """Right-hand side of one problem against the solution of another is
    symmetric in the pair; this is the discrete form of the exchange argument
    behind the symmetric effective tensor."""
    grid, eq, system, sols = charged
    keys = sorted(sols)
    for a in keys:
        for b in keys:
            if a >= b:
                continue
            pab = system.rhs(*a) @ system.vector_of(sols[b])
            pba = system.rhs(*b) @ system.vector_of(sols[a])
            assert pab == pytest.approx(pba, rel=1e-8, abs=1e-12)


def test_dense_oracle_on_small_grid():
    grid, eq = _setup(BINARY, 0.2, n=32)
    system = CellSystem(eq, grid, BINARY)
    K = system.K.toarray()
    # border with one zero-mean constraint per scalar block (the constants
    # span the kernel) and solve densely
    n = K.shape[0]
    C = np.zeros((n, BINARY.N + 1))
    for c in range(BINARY.N + 1):
        C[system._slice(1 + c), c] = 1.0
    big = np.block([[K, C], [C.T, np.zeros((C.shape[1], C.shape[1]))]])
    for family, k in [(0, 1), (1, 2), (2, 1)]:
        b = system.rhs(family, k)
        x = np.linalg.solve(big, np.r_[b, np.zeros(C.shape[1])])[:n]
        sol = system.solve(family, k)
        got = system.vector_of(sol)
        np.testing.assert_allclose(got, x, atol=1e-8 * np.abs(x).max())


@pytest.mark.parametrize("k", [1, 2])
def test_uncharged_velocity_is_plain_stokes(k):
    grid, eq = _setup(BINARY, 0.0, n=64, L=2, seed=4)
    sol = solve_pressure_family(eq, grid, BINARY, k)
    ref, _, _ = solve_stokes(grid, grid.constant_force((1.0, 0.0) if k == 1 else (0.0, 1.0)))
    np.testing.assert_allclose(sol.v.open_values(), ref.open_values(), atol=1e-8 * np.abs(ref.open_values()).max())
    # doubling the bulk concentrations changes nothing when the fluid is neutral
    doubled = ElectrolyteSpec((-1, 1), (1.0, 1.0), (1.0, 1.0), 1.0, 1.0)
    eq2 = solve_equilibrium(grid, doubled, SurfaceCharge("constant", 0.0))
    sol2 = solve_pressure_family(eq2, grid, doubled, k)
    np.testing.assert_allclose(sol2.v.open_values(), ref.open_values(), atol=1e-8 * np.abs(ref.open_values()).max())


def test_all_fluid_species_flux_is_constant():
    empty = Microstructure(1.0, np.zeros((0, 2)), np.zeros(0), "poisson-voronoi", 0, WIDE)
    grid = voxelize(empty, 32)
    eq = solve_equilibrium(grid, BINARY, SurfaceCharge("constant", 0.0))
    sol = solve_species_family(eq, grid, BINARY, 2, 1)
    assert np.abs(sol.theta[1].fluid_values()).max() <= 1e-12
    np.testing.assert_allclose(sol.v.open_values(), 0.0, atol=1e-12)
    d = grid.face_dir[grid.open_faces]
    flux = 0.5 * (1.0 / 1.0) * (sol.theta_gradient(1) + (d == 0))
    np.testing.assert_allclose(flux[d == 0], 0.5, atol=1e-12)
    np.testing.assert_allclose(flux[d == 1], 0.0, atol=1e-12)


def test_species_index_checked(charged):
    grid, eq, system, _ = charged
    with pytest.raises(ValueError):
        solve_species_family(eq, grid, TERNARY, 4, 1, system)
    with pytest.raises(ValueError):
        system.rhs(0, 3)


def test_loose_tolerance_leaves_visible_error():
    grid, eq = _setup(BINARY, 0.2, n=32)
    tight = CellSystem(eq, grid, BINARY, tol=1e-10).solve(1, 1)
    loose = CellSystem(eq, grid, BINARY, tol=1e-3).solve(1, 1)
    diff = np.abs(tight.v.open_values() - loose.v.open_values()).max() / np.abs(tight.v.open_values()).max()
    assert 1e-9 < diff < 1e-2
