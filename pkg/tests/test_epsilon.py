import math

import numpy as np
import pytest

import ekhomog.epsilon as epsmod
from ekhomog.cell import solve_all_cells
from ekhomog.epsilon import (EpsilonSystem, _rel, build_perforated_domain, convergence_metrics,
                             homogenized_energy, reconstruct, solve_linearized, write_metrics_csv)
from ekhomog.errors import ResolutionTooCoarse
from ekhomog.geometry import DisperseParams, Microstructure, rasterize, voxelize
from ekhomog.macrosolve import MacroProblem, solve_macro
from ekhomog.model import ElectrolyteSpec, Forcing, SurfaceCharge
from ekhomog.onsager import assemble_tensor
from ekhomog.pb import solve_equilibrium

SPEC = ElectrolyteSpec((-1, 1), (0.5, 0.5), (1.0, 1.0), 1.0, 1.0)
FORCING = Forcing((0.2, -0.1), (0.3, 1.0))


@pytest.fixture(scope="module")
def setup():
    micro = Microstructure(1.0, [[0.45, 0.55]], [0.3], "perturbed-lattice", 0,
                           DisperseParams(delta_min=0.125))
    grid = voxelize(micro, 32)
    eq = solve_equilibrium(grid, SPEC, SurfaceCharge("constant", 0.2))
    dom = build_perforated_domain(micro, 0.25, 128)
    return micro, grid, eq, dom


@pytest.fixture(scope="module")
def solved(setup):
    micro, grid, eq, dom = setup
    return solve_linearized(dom, eq, SPEC, FORCING, tol=1e-10)


def _count_kept(micro, eps):
    # grain images fully inside the inner square [eps, 1 - eps]^2
    tiles = round(1 / (eps * micro.L))
    count = 0
    for (cx, cy), r in zip(micro.centers, micro.radii):
        for a in range(tiles):
            for b in range(tiles):
                x, y, R = eps * (cx + a * micro.L), eps * (cy + b * micro.L), eps * r
                count += (x - R >= eps) and (y - R >= eps) and (x + R <= 1 - eps) and (y + R <= 1 - eps)
    return count


def test_grain_count_and_solid_cells(setup):
    micro, _, _, dom = setup
    assert dom.n_grains == _count_kept(micro, 0.25) == 4
    base_solid = int((rasterize(micro, 32) >= 0).sum())
    assert int((~dom.grid.cell_mask).sum()) == 4 * base_solid
    assert dom.grid.wall_weight.sum() == pytest.approx(4 * 2 * math.pi * 0.25 * 0.3)


def test_periodic_sampling(setup):
    micro, grid, _, dom = setup
    base = np.arange(32 * 32, dtype=float).reshape(32, 32)
    full = np.full(dom.grid.cell_mask.shape, np.nan)
    full[dom.grid.cell_mask] = dom.sample_cells(base, -1.0)
    # an interior tile copies the base field exactly
    tile = full[32:64, 32:64]
    np.testing.assert_array_equal(tile[grid.cell_mask], base[grid.cell_mask])
    # the outer band has no grains: base-solid cells get the fill value
    band = full[:32, :32]
    assert np.all(band[~grid.cell_mask] == -1.0)


@pytest.mark.parametrize("eps,m,exc", [(0.3, 120, ValueError), (0.25, 130, ValueError),
                                       (0.25, 64, ResolutionTooCoarse)])
def test_domain_errors(setup, eps, m, exc):
    with pytest.raises(exc):
        build_perforated_domain(setup[0], eps, m)


def test_zero_forcing(setup):
    _, _, eq, dom = setup
    sol = solve_linearized(dom, eq, SPEC, Forcing())
    assert sol.report.iterations == 0
    assert not np.any(sol.u.open_values()) and all(not np.any(p.fluid_values()) for p in sol.phi)


def test_nonfinite_forcing(setup):
    _, _, eq, dom = setup
    with pytest.raises(ValueError):
        solve_linearized(dom, eq, SPEC, Forcing((math.nan, 0.0), (0.0, 0.0)))


def test_energy_identity(solved):
    assert solved.report.converged
    assert solved.energy["residual"] <= 1e-8
    assert solved.energy["dissipation"] > 0


def test_gauss_seidel_matches_direct(setup, solved):
    _, _, eq, dom = setup
    direct = solve_linearized(dom, eq, SPEC, FORCING, tol=1e-10, method="direct")
    scale = np.abs(direct._x).max()
    np.testing.assert_allclose(solved._x, direct._x, atol=1e-8 * scale)


def test_iterative_stokes_path(setup, solved, monkeypatch):
    _, _, eq, dom = setup
    monkeypatch.setattr(epsmod, "DIRECT_STOKES_LIMIT", 0)
    sol = solve_linearized(dom, eq, SPEC, FORCING, tol=1e-10)
    assert sol.report.converged
    scale = np.abs(solved._x).max()
    np.testing.assert_allclose(sol._x, solved._x, atol=1e-8 * scale)


def test_unknown_method(setup):
    _, _, eq, dom = setup
    with pytest.raises(ValueError):
        solve_linearized(dom, eq, SPEC, FORCING, method="jacobi")


def test_system_is_symmetric(setup):
    _, _, eq, dom = setup
    K = EpsilonSystem(dom, eq, SPEC).K
    assert abs(K - K.T).max() <= 1e-12 * abs(K).max()


@pytest.fixture(scope="module")
def twoscale(setup):
    micro, grid, eq, dom = setup
    cells, _ = solve_all_cells(eq, grid, SPEC)
    macro = solve_macro(MacroProblem(32, assemble_tensor(cells, eq, grid, SPEC), FORCING))
    return cells, macro


def test_reconstruction_of_zero_macro_is_zero(setup, twoscale):
    _, _, eq, dom = setup
    cells, _ = twoscale
    zero = solve_macro(MacroProblem(32, assemble_tensor(cells, eq, setup[1], SPEC)))
    u, g = reconstruct(zero, cells, eq, dom, Forcing())
    assert not np.any(u) and all(not np.any(x) for x in g)


def test_metrics(setup, solved, twoscale):
    _, _, eq, dom = setup
    cells, macro = twoscale
    rec = reconstruct(macro, cells, eq, dom, FORCING)
    visc, species = homogenized_energy(macro, cells, eq, SPEC, FORCING)
    met = convergence_metrics(solved, rec, dom, visc + sum(species))
    assert 0 < met["velocity_error"] < math.inf
    assert len(met["species_gradient_error"]) == 2
    assert met["poincare_ratio"] > 0 and met["n_grains"] == 4
    assert met["dissipation"] > 0 and met["homogenized_dissipation"] > 0


def test_metrics_csv(tmp_path, setup, solved, twoscale):
    _, _, eq, dom = setup
    cells, macro = twoscale
    met = convergence_metrics(solved, reconstruct(macro, cells, eq, dom, FORCING), dom)
    write_metrics_csv(tmp_path / "m.csv", [met], "f00d")
    head, row = (tmp_path / "m.csv").read_text().splitlines()
    assert head.split(",")[:6] == ["eps", "m", "n_grains", "velocity_error",
                                   "species_gradient_error_1", "species_gradient_error_2"]
    assert row.endswith(",f00d")


def test_relative_norm_edge_cases():
    assert _rel(0.0, 0.0) == 0.0
    assert _rel(1.0, 0.0) == math.inf
    assert _rel(4.0, 1.0) == 2.0


def test_errors_shrink_with_eps():
    # thin double layers: the fluid in the clearance band is nearly neutral
    spec = ElectrolyteSpec((-1, 1), (0.5, 0.5), (1.0, 1.0), 100.0, 1.0)
    forcing = Forcing((0.0, 0.0), (0.3, 1.0))
    micro = Microstructure(1.0, [[0.45, 0.55]], [0.3], "perturbed-lattice", 0,
                           DisperseParams(delta_min=0.125))
    grid = voxelize(micro, 32)
    eq = solve_equilibrium(grid, spec, SurfaceCharge("constant", 0.2))
    cells, _ = solve_all_cells(eq, grid, spec)
    macro = solve_macro(MacroProblem(32, assemble_tensor(cells, eq, grid, spec), forcing))
    errs = []
    for eps, m in ((0.25, 128), (0.125, 256)):
        dom = build_perforated_domain(micro, eps, m)
        sol = solve_linearized(dom, eq, spec, forcing)
        errs.append(convergence_metrics(sol, reconstruct(macro, cells, eq, dom, forcing), dom))
    assert errs[1]["velocity_error"] < errs[0]["velocity_error"]
    for a, b in zip(errs[0]["species_gradient_error"], errs[1]["species_gradient_error"]):
        assert b < a
