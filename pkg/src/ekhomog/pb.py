"""Equilibrium Poisson-Boltzmann potential on a periodic fluid grid.

The discrete problem is the minimiser of the strictly convex energy

    J(psi) = 1/2 psi^T L psi + beta h^2 sum_c Gamma_N(psi_c) + N_sigma s^T psi

where ``L = h^2 G^T G`` is the no-flux Laplacian (times cell area), ``s_c``
collects ``sigma * weight`` over the wall faces of cell ``c`` and
``Gamma_N' = n_HN`` is the Boltzmann charge density with a linear cut-off
beyond ``|psi| = N``.  Its gradient is the flux-balance residual of
``-lap psi = -beta n_H(psi)`` with the surface-charge flux condition.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import solve_banded

from .errors import CutoffActive, NoConvergence
from .grid import ScalarField, SolveReport, fsum_dot, solve_spd
from .model import BoundConstants, ElectrolyteSpec, SurfaceCharge, bound_constants, validate_electrolyte

NEWTON_TOL = 1e-10
ARMIJO = 1e-4
MAX_HALVINGS = 40


@dataclass
class ScreenedLift:
    v: ScalarField
    V_m: float
    V_M: float
    report: SolveReport


@dataclass
class EquilibriumState:
    psi: ScalarField
    n0: list
    bounds: BoundConstants
    energy: float
    report: SolveReport
    cutoff: float = math.inf
    lift: ScreenedLift | None = None
    energy_history: list = field(default_factory=list)
    spec: ElectrolyteSpec | None = None

    def summary(self):
        return {
            "energy": self.energy,
            "bounds": self.bounds.as_dict(),
            "cutoff": self.cutoff,
            "newton_iterations": self.report.iterations,
            "residual": self.report.residual,
            "psi_min_observed": float(self.psi.fluid_values().min()),
            "psi_max_observed": float(self.psi.fluid_values().max()),
        }


# ---------------------------------------------------------------------------
# nonlinearity with cut-off


class CutoffNonlinearity:
    """``Gamma_N``, ``n_HN = Gamma_N'`` and ``n_HN'`` for a given spec.

    Inside ``[-N, N]`` these are the exact Boltzmann expressions; outside,
    ``n_HN`` continues linearly (so ``Gamma_N`` quadratically), which keeps
    the energy finite and convex for any argument.
    """

    def __init__(self, spec: ElectrolyteSpec, level=math.inf):
        self.z = np.asarray(spec.z, dtype=float)
        self.n = np.asarray(spec.n_c, dtype=float)
        self.level = float(level)

    def _exact(self, x):
        e = np.exp(-np.multiply.outer(x, self.z))
        gam = (e - 1.0) @ self.n
        nh = -(e @ (self.z * self.n))
        dnh = e @ (self.z * self.z * self.n)
        return gam, nh, dnh

    def __call__(self, x):
        """Return ``(Gamma_N, n_HN, n_HN')`` at ``x``."""
        x = np.asarray(x, dtype=float)
        N = self.level
        xc = np.clip(x, -N, N)
        gam, nh, dnh = self._exact(xc)
        d = x - xc
        if np.isfinite(N) and np.any(d):
            gam = gam + nh * d + 0.5 * dnh * d * d
            nh = nh + dnh * d
        return gam, nh, dnh


# ---------------------------------------------------------------------------


def _surface_source(grid, sc: SurfaceCharge):
    n_grains = int(grid.wall_grain.max()) + 1 if grid.wall_faces.size else 0
    return grid.boundary_source(sc.per_grain(n_grains)) if n_grains else np.zeros(grid.n_fluid)


def solve_screened_lift(grid, sc: SurfaceCharge, N_sigma: float, tol=NEWTON_TOL) -> ScreenedLift:
    """Solve ``-lap v + v = 0`` in the fluid with ``dv/dnu = -N_sigma sigma``
    on grain boundaries (``nu`` pointing into the grains)."""
    s = _surface_source(grid, sc)
    h2 = grid.h ** 2
    rhs = -N_sigma * s
    if not np.any(rhs):
        v = np.zeros(grid.n_fluid)
        report = SolveReport(0, 0.0, "cg")
    else:
        M = h2 * grid.laplacian + sp.identity(grid.n_fluid) * h2
        v, report = solve_spd(M, rhs, tol=tol)
    return ScreenedLift(grid.scalar(v), float(v.min()), float(v.max()), report)


def equilibrium_concentrations(psi: ScalarField, spec: ElectrolyteSpec):
    """Boltzmann concentrations ``n_j^c exp(-z_j psi)`` (zero in the solid)."""
    grid = psi.grid
    p = psi.fluid_values()
    return [grid.scalar(nj * np.exp(-zj * p)) for zj, nj in zip(spec.z, spec.n_c)]


def pb_energy(grid, psi_vec, spec, s, nonlin):
    h2 = grid.h ** 2
    Lpsi = h2 * (grid.laplacian @ psi_vec)
    gam, _, _ = nonlin(psi_vec)
    return math.fsum([0.5 * fsum_dot(psi_vec, Lpsi), spec.beta * h2 * fsum_dot(gam),
                      spec.N_sigma * fsum_dot(s, psi_vec)])


def pb_gradient(grid, psi_vec, spec, s, nonlin):
    h2 = grid.h ** 2
    _, nh, _ = nonlin(psi_vec)
    return h2 * (grid.laplacian @ psi_vec) + spec.beta * h2 * nh + spec.N_sigma * s


def solve_equilibrium(grid, spec: ElectrolyteSpec, sc: SurfaceCharge, tol=NEWTON_TOL,
                      max_iter=100, psi0=None) -> EquilibriumState:
    """Damped Newton minimisation of the discrete Poisson-Boltzmann energy.

    The cut-off level is derived from the a-priori bounds obtained from the
    screened lift, so the cut-off must be inactive at the solution;
    :class:`CutoffActive` is raised otherwise.
    """
    validate_electrolyte(spec)
    lift = solve_screened_lift(grid, sc, spec.N_sigma)
    bounds = bound_constants(spec, lift.V_m, lift.V_M)
    level = bounds.cutoff_level
    nonlin = CutoffNonlinearity(spec, level)
    s = _surface_source(grid, sc)
    h2 = grid.h ** 2
    beta = spec.beta
    Lh = (h2 * grid.laplacian).tocsr()

    psi = np.zeros(grid.n_fluid) if psi0 is None else np.asarray(psi0, dtype=float).copy()
    scale = float(np.linalg.norm(spec.N_sigma * s)) or 1.0
    J = pb_energy(grid, psi, spec, s, nonlin)
    history = [J]
    res_hist = []
    g = pb_gradient(grid, psi, spec, s, nonlin)
    res = float(np.linalg.norm(g)) / scale
    it = 0
    while res > tol and it < max_iter:
        it += 1
        _, _, dnh = nonlin(psi)
        H = (Lh + sp.diags(beta * h2 * dnh)).tocsc()
        d = -spla.splu(H, permc_spec="MMD_AT_PLUS_A").solve(g)
        slope = float(g @ d)
        alpha = 1.0
        for _ in range(MAX_HALVINGS + 1):
            trial = psi + alpha * d
            Jt = pb_energy(grid, trial, spec, s, nonlin)
            if Jt <= J + ARMIJO * alpha * slope:
                break
            # near the minimum the decrease drops below round-off in J;
            # a full step that reduces the gradient is then accepted
            gt = pb_gradient(grid, trial, spec, s, nonlin)
            if alpha == 1.0 and Jt - J <= 1e-13 * max(1.0, abs(J)) and \
                    np.linalg.norm(gt) < np.linalg.norm(g):
                break
            alpha *= 0.5
        else:
            raise NoConvergence("line search failed", SolveReport(it, res, "newton", False, res_hist))
        psi, J = trial, Jt
        history.append(Jt)
        g = pb_gradient(grid, psi, spec, s, nonlin)
        res = float(np.linalg.norm(g)) / scale
        res_hist.append(res)
    report = SolveReport(it, res, "newton", res <= tol, res_hist)
    if not report.converged:
        raise NoConvergence(f"Newton stopped at relative residual {res:.3e}", report)
    if psi.size and np.abs(psi).max() >= level:
        raise CutoffActive(f"|psi| reached the cut-off level {level:.4g}")
    field_ = grid.scalar(psi)
    return EquilibriumState(field_, equilibrium_concentrations(field_, spec), bounds, history[-1], report,
                            cutoff=level, lift=lift, energy_history=history, spec=spec)


def charge_balance(state: EquilibriumState, grid, spec, sc):
    """Return ``(volume charge, surface charge)`` which must agree at equilibrium:
    ``beta sum_c sum_j z_j n_j h^2`` and ``N_sigma sum_faces sigma w``."""
    h2 = grid.h ** 2
    vol = spec.beta * h2 * math.fsum(
        math.fsum((zj * n.fluid_values()).tolist()) for zj, n in zip(spec.z, state.n0))
    surf = spec.N_sigma * fsum_dot(_surface_source(grid, sc))
    return vol, surf


# ---------------------------------------------------------------------------
# one-dimensional reference solutions


def slab_grid(length: float, resolution: int):
    """Periodic one-row grid: solid in the first half, fluid in the second."""
    from .geometry import FluidGrid

    mask = np.zeros((1, resolution), dtype=bool)
    mask[0, resolution // 2:] = True
    return FluidGrid(mask, length / resolution, L=length)


def gouy_chapman_oracle(spec: ElectrolyteSpec, sigma: float, N_sigma: float, length: float,
                        resolution: int, refine: int = 128, tol=1e-14, max_iter=100):
    """Reference potential across the fluid half of a slab.

    Solves ``psi'' = beta n_H(psi)`` (``2 beta n^c sinh psi`` for a symmetric
    binary electrolyte) on ``[0, W/2]``, ``W = length/2``, with
    ``psi'(0) = N_sigma sigma`` at the wall and ``psi'(W/2) = 0`` by symmetry,
    by Newton's method for a vertex-centred scheme ``refine`` times finer than
    the target grid.  Returns ``(x, psi)`` with ``x`` measured from the wall;
    the target grid's cell centres are nodes of the fine mesh.
    """
    if len(spec.z) != 2 or spec.z[0] != -spec.z[1]:
        raise ValueError("the slab oracle needs a symmetric binary electrolyte")
    h = length / resolution
    hf = h / refine
    M = int(round((length / 4) / hf))
    x = np.arange(M + 1) * hf
    nonlin = CutoffNonlinearity(spec)
    beta = spec.beta
    g0 = N_sigma * sigma
    psi = np.zeros(M + 1)
    if g0 == 0.0:
        return x, psi
    # F_i = (psi_{i-1} - 2 psi_i + psi_{i+1})/hf^2 - beta n_H(psi_i), with
    # ghost values from the two Neumann conditions
    for it in range(max_iter):
        _, nh, dnh = nonlin(psi)
        lap = np.empty_like(psi)
        lap[1:-1] = psi[:-2] - 2 * psi[1:-1] + psi[2:]
        lap[0] = 2 * (psi[1] - psi[0]) - 2 * hf * g0
        lap[-1] = 2 * (psi[-2] - psi[-1])
        F = lap / hf ** 2 - beta * nh
        ab = np.zeros((3, M + 1))
        ab[0, 1:] = 1.0 / hf ** 2
        ab[0, 1] = 2.0 / hf ** 2
        ab[1, :] = -2.0 / hf ** 2 - beta * dnh
        ab[2, :-1] = 1.0 / hf ** 2
        ab[2, -2] = 2.0 / hf ** 2
        step = solve_banded((1, 1), ab, F)
        psi = psi - step
        res = np.abs(step).max() / np.abs(psi).max()
        if res < tol:
            break
    else:
        raise NoConvergence(f"slab oracle Newton stalled at relative step {res:.3e}")
    return x, psi


def slab_fluid_profile(state: EquilibriumState, grid):
    """Potential on the first half of the fluid region of a slab grid,
    with distances measured from the wall."""
    n = grid.nx
    vals = state.psi.values[0, n // 2:]
    half = vals[: (n // 2) // 2]
    x = (np.arange(half.size) + 0.5) * grid.h
    return x, half


def slab_error(spec, sigma, N_sigma, length, resolution, refine=128):
    """Relative max-norm difference between the grid solver and the oracle."""
    grid = slab_grid(length, resolution)
    sc = SurfaceCharge("constant", sigma)
    state = solve_equilibrium(grid, spec, sc)
    x, ps = slab_fluid_profile(state, grid)
    xf, pf = gouy_chapman_oracle(spec, sigma, N_sigma, length, resolution, refine)
    idx = np.rint(x / (xf[1] - xf[0])).astype(int)
    ref = pf[idx]
    return float(np.abs(ps - ref).max() / np.abs(ref).max())


def screened_lift_slab_oracle(sigma, N_sigma, length, resolution):
    """Independent dense solve of the screened lift on a slab grid.

    Assembles ``(-d^2/dx^2 + 1)`` on the ``resolution/2`` fluid cells of a
    one-row slab with flux ``N_sigma sigma`` entering through both walls,
    using plain loops rather than the grid operators.
    """
    h = length / resolution
    m = resolution // 2
    A = np.zeros((m, m))
    b = np.zeros(m)
    for k in range(m):
        A[k, k] = 1.0
        for nb in (k - 1, k + 1):
            if 0 <= nb < m:
                A[k, k] += 1.0 / h ** 2
                A[k, nb] -= 1.0 / h ** 2
    b[0] -= N_sigma * sigma / h
    b[-1] -= N_sigma * sigma / h
    return np.linalg.solve(A, b)
