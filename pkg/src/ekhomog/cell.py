"""Corrector (cell) problems on the periodic RVE.

For each driving direction ``k`` two families are solved:

* pressure family (``family=0``): unit macroscopic pressure drop, force ``e^k``;
* species family ``i`` (``family=i``, 1-based): unit electrochemical drop of
  species ``i``, force ``z_i n_i e^k`` and drift ``n_i (z_i/Pe_i) e^k``.

Unknowns are the face velocity ``v``, the cell pressure ``pi`` and one
scalar potential ``theta_j`` per species, whose discrete gradient is the
species corrector.  With the species rows multiplied by ``-z_j`` the coupled
system is symmetric::

    [ A        G   -z_j N_j G              ] [v      ]   [f_v      ]
    [ G^T      0    0                      ] [pi     ] = [0        ]
    [-z_j G^T N_j  0  -(z_j^2/Pe_j) G^T N_j G] [theta_j]   [f_theta_j]

``N_j`` is the diagonal of face concentrations (harmonic mean of the two
cell values).  All 2(N+1) right-hand sides share one factorisation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import NoConvergence
from .grid import DEFAULT_TOL, MacVectorField, QuasiDefiniteSolver, ScalarField, SolveReport, fsum_dot


def face_concentration(grid, n_cell: ScalarField):
    """Harmonic mean of a positive cell field on every open face."""
    vals = n_cell.values.ravel()
    f = grid.open_faces
    a, b = vals[grid.face_a[f]], vals[grid.face_b[f]]
    return 2.0 * a * b / (a + b)


@dataclass
class CellSolution:
    family: int
    k: int
    v: MacVectorField
    pi: ScalarField
    theta: list
    residuals: dict = field(default_factory=dict)
    report: SolveReport | None = None
    drive: float = 1.0

    def theta_gradient(self, j):
        """Open-face gradient of ``theta_j`` (0-based species index)."""
        return self.v.grid.G @ self.theta[j].fluid_values()


class CellSystem:
    """Assembled and factorised coupled cell operator for one realisation."""

    def __init__(self, eq, grid, spec, tol=DEFAULT_TOL):
        self.grid, self.spec, self.eq, self.tol = grid, spec, eq, tol
        G = grid.G.tocsr()
        self.Nf = [face_concentration(grid, n) for n in eq.n0]
        nv, npr, N = grid.n_open, grid.n_fluid, spec.N
        self.offsets = [0, nv] + [nv + npr * (1 + j) for j in range(N + 1)]
        blocks = [[None] * (N + 2) for _ in range(N + 2)]
        blocks[0][0] = grid.A
        blocks[0][1] = G
        blocks[1][0] = G.T
        for j, (zj, Pej) in enumerate(zip(spec.z, spec.Pe)):
            NG = sp.diags(self.Nf[j]) @ G
            blocks[0][2 + j] = -zj * NG
            blocks[2 + j][0] = (-zj * NG).T
            blocks[2 + j][2 + j] = -(zj * zj / Pej) * (G.T @ NG)
        self.K = sp.bmat(blocks, format="csr")
        signs = np.concatenate([np.full(nv, 1.0 if grid.velocity_singular else 0.0),
                                -np.ones(npr * (N + 1))])
        # the regularisation is refined away only down to ``tol``, so a loose
        # tolerance leaves an O(tol) asymmetry in the tensor
        self.solver = QuasiDefiniteSolver(self.K, signs, delta=max(1e-8, 1e-2 * tol), project=self._project)

    # ---------------------------------------------------------------- helpers
    def _slice(self, b):
        return slice(self.offsets[b], self.offsets[b + 1])

    def _project(self, x):
        x = x.copy()
        for b in range(1, self.spec.N + 2):
            s = self._slice(b)
            x[s] -= x[s].mean()
        if self.grid.velocity_singular:
            d = self.grid.face_dir[self.grid.open_faces]
            for k in (0, 1):
                sel = np.flatnonzero(d == k)
                x[sel] -= x[sel].mean()
        return x

    def rhs(self, family, k, drive=1.0):
        """Right-hand side for ``family`` (0 = pressure, i = species i) and
        direction ``k`` in {1, 2}."""
        grid, spec = self.grid, self.spec
        if k not in (1, 2):
            raise ValueError("direction k must be 1 or 2")
        if not 0 <= family <= spec.N:
            raise ValueError(f"family must lie in 0..{spec.N}")
        ek = grid.constant_force((1.0, 0.0) if k == 1 else (0.0, 1.0))
        b = np.zeros(self.K.shape[0])
        if family == 0:
            b[self._slice(0)] = ek
        else:
            i = family - 1
            zi, Pei = spec.z[i], spec.Pe[i]
            b[self._slice(0)] = zi * self.Nf[i] * ek
            b[self._slice(2 + i)] = (zi * zi / Pei) * (grid.G.T @ (self.Nf[i] * ek))
        if grid.velocity_singular:
            # the mean force has no wall to act against on a solid-free torus
            b = self._project_force(b)
        return drive * b

    def _project_force(self, b):
        d = self.grid.face_dir[self.grid.open_faces]
        for k in (0, 1):
            sel = np.flatnonzero(d == k)
            b[sel] -= b[sel].mean()
        return b

    def solve(self, family, k, drive=1.0):
        b = self.rhs(family, k, drive)
        x, report = self.solver.solve(b, self.tol)
        x = self._project(x)
        return self._wrap(family, k, x, b, report, drive)

    def _wrap(self, family, k, x, b, report, drive):
        grid = self.grid
        sol = CellSolution(
            family, k, grid.vector(x[self._slice(0)]), grid.scalar(x[self._slice(1)]),
            [grid.scalar(x[self._slice(2 + j)]) for j in range(self.spec.N)], report=report, drive=drive)
        sol.residuals = self.residuals(sol, x, b)
        return sol

    # ------------------------------------------------------------ diagnostics
    def vector_of(self, sol):
        return np.concatenate([sol.v.open_values(), sol.pi.fluid_values()]
                              + [t.fluid_values() for t in sol.theta])

    def residuals(self, sol, x=None, b=None):
        """Relative residual norms of every block plus the energy identity."""
        if x is None:
            x = self.vector_of(sol)
        if b is None:
            b = self.rhs(sol.family, sol.k, sol.drive)
        r = b - self.K @ x
        bnorm = float(np.linalg.norm(b)) or 1.0
        out = {
            "momentum": float(np.linalg.norm(r[self._slice(0)])) / bnorm,
            "divergence": float(np.linalg.norm(r[self._slice(1)])) / bnorm,
            "species": [float(np.linalg.norm(r[self._slice(2 + j)])) / bnorm for j in range(self.spec.N)],
            "wall_leakage": self.wall_leakage(sol),
        }
        out["energy"] = self.energy_residual(x, b)
        out["combined"] = float(np.linalg.norm(r)) / bnorm
        return out

    def dissipation(self, x):
        """``v^T A v + sum_j (z_j^2/Pe_j) (G theta_j)^T N_j (G theta_j)``."""
        v = x[self._slice(0)]
        terms = [fsum_dot(v, self.grid.A @ v)]
        for j, (zj, Pej) in enumerate(zip(self.spec.z, self.spec.Pe)):
            gt = self.grid.G @ x[self._slice(2 + j)]
            terms.append(zj * zj / Pej * fsum_dot(self.Nf[j] * gt, gt))
        return math.fsum(terms)

    def energy_residual(self, x, b):
        """Testing the system with its own solution: the antisymmetric
        velocity/potential coupling cancels, leaving
        ``dissipation = f_v . v - sum_j f_theta_j . theta_j``."""
        diss = self.dissipation(x)
        work = fsum_dot(b[self._slice(0)], x[self._slice(0)]) - math.fsum(
            fsum_dot(b[self._slice(2 + j)], x[self._slice(2 + j)]) for j in range(self.spec.N))
        scale = max(abs(diss), abs(work))
        return abs(diss - work) / scale if scale > 0 else 0.0

    def wall_leakage(self, sol):
        """Largest per-grain flux through grain boundaries.

        Velocities and corrector gradients live on open faces only, so the
        stored wall-face values are zero by construction; this reads them back.
        """
        grid = self.grid
        if not getattr(grid, "wall_faces", np.zeros(0)).size:
            return 0.0
        vals = sol.v.face_values()[grid.wall_faces] * grid.wall_weight
        per = np.bincount(grid.wall_grain, weights=np.abs(vals))
        return float(per.max())


def solve_pressure_family(eq, grid, spec, k, system=None, drive=1.0) -> CellSolution:
    system = system or CellSystem(eq, grid, spec)
    return system.solve(0, k, drive)


def solve_species_family(eq, grid, spec, i, k, system=None, drive=1.0) -> CellSolution:
    """Species-``i`` corrector (``i`` is 1-based) in direction ``k``."""
    if not 1 <= i <= spec.N:
        raise ValueError(f"species index {i} outside 1..{spec.N}")
    system = system or CellSystem(eq, grid, spec)
    return system.solve(i, k, drive)


def solve_all_cells(eq, grid, spec, tol=DEFAULT_TOL, system=None):
    """All ``2 (N+1)`` cell problems with one shared factorisation.

    Returns ``(solutions, system)`` with ``solutions[(family, k)]``.
    """
    system = system or CellSystem(eq, grid, spec, tol)
    sols = {}
    for family in range(spec.N + 1):
        for k in (1, 2):
            sols[(family, k)] = system.solve(family, k)
            if sols[(family, k)].residuals["combined"] > 10 * tol:
                raise NoConvergence(f"cell problem ({family}, {k}) did not converge",
                                    sols[(family, k)].report)
    return sols, system


def cell_residuals(sol: CellSolution, eq, grid, spec, system=None):
    system = system or CellSystem(eq, grid, spec)
    return system.residuals(sol)
