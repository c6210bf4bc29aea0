"""Directly resolved linearised problem on a perforated square and its
comparison with the two-scale reconstruction.

The base microstructure (periodic cell of side ``L``) is scaled by ``eps`` and
tiled over ``G = (0, 1)^2``; grain images reaching into the band of width
``eps`` along ``dG`` are dropped.  The grid over ``G`` is aligned with the
cell grid, so every cell of the perforated grid corresponds to exactly one
cell of the base grid and periodic sampling is an index lookup.

Unknowns on the perforated grid: face velocity ``u``, cell pressure ``P`` and
one potential ``Phi_j`` per species.  As for the cell problems, the species
rows are multiplied by ``-z_j`` so that the coupled matrix is symmetric::

    [ eps^2 A      G   -z_j N_j G               ]
    [ G^T          0    0                       ]
    [-z_j G^T N_j  0   -(z_j^2/Pe_j) Gd^T W N_j Gd ]

``Gd`` is the gradient including outer faces, where ``Phi_j = 0`` is imposed
half a cell away; ``W`` holds the face weights relative to ``h^2``.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np
import pyamg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .cell import face_concentration
from .errors import ConfigMismatch, NoConvergence, ResolutionTooCoarse
from .geometry import FluidGrid, _require_connected, rasterize
from .grid import DEFAULT_TOL, MacGrid, QuasiDefiniteSolver, ScalarField, SolveReport, fsum_dot
from .model import Forcing

MIN_CELLS_ACROSS_GRAIN = 16
# Stokes blocks above this many unknowns are solved iteratively
DIRECT_STOKES_LIMIT = 300_000
MINRES_INNER_TOL = 1e-4


@dataclass
class PerforatedDomain:
    """Grid over the unit square with ``eps``-scaled tiled grains.

    ``base_index`` maps every cell to the flat index of its cell in the base
    grid; ``image`` holds, for solid cells, a unique id of the grain image.
    """

    eps: float
    micro: object
    grid: FluidGrid
    n_base: int
    tiles: int
    base_index: np.ndarray
    image: np.ndarray
    kept_images: list = field(default_factory=list)

    @property
    def m(self):
        return self.grid.nx

    @property
    def n_grains(self):
        return len(self.kept_images)

    def wrap_faces(self):
        """Base-grid face index of every open face of the perforated grid."""
        g, n = self.grid, self.n_base
        f = g.open_faces
        isx = f < g.n_xfaces
        out = np.empty(f.size, dtype=np.int64)
        j, i = np.divmod(f[isx], g.nxf)
        out[isx] = (j % n) * n + (i % n)
        jy, iy = np.divmod(f[~isx] - g.n_xfaces, g.nx)
        out[~isx] = n * n + (jy % n) * n + (iy % n)
        return out

    def sample_cells(self, field_values, fill):
        """Sample a base-grid cell array (``(n, n)``) at every fluid cell.

        Cells that are solid in the base grid but fluid here (dropped grains)
        get ``fill``.
        """
        vals = np.asarray(field_values, dtype=float).ravel()[self.base_index]
        base_solid = ~self.micro_mask.ravel()[self.base_index]
        vals = np.where(base_solid, fill, vals)
        return vals[self.grid.fluid_cells]

    @property
    def micro_mask(self):
        return self._base_mask


def _grain_images(micro, eps, tiles):
    """All grain images ``(g, a, b)`` whose scaled disk lies inside
    ``[eps, 1 - eps]^2``; brute-force enumeration."""
    L = micro.L
    kept = []
    for g, ((cx, cy), r) in enumerate(zip(micro.centers, micro.radii)):
        for a in range(-1, tiles + 1):
            for b in range(-1, tiles + 1):
                x, y = eps * (cx + a * L), eps * (cy + b * L)
                R = eps * r
                if min(x, y, 1 - x, 1 - y) - R >= eps - 1e-12:
                    kept.append((g, a, b))
    return kept


def build_perforated_domain(micro, eps, m, check_resolution=True) -> PerforatedDomain:
    """Tile ``micro`` scaled by ``eps`` over the unit square on an ``m x m`` grid.

    ``eps * L`` must divide 1 and ``m`` must be a multiple of the number of
    tiles, so the perforated grid coincides with a base grid of
    ``m * eps * L`` cells per side on every tile.
    """
    L = micro.L
    tiles_f = 1.0 / (eps * L)
    tiles = int(round(tiles_f))
    if tiles < 1 or abs(tiles - tiles_f) > 1e-9:
        raise ValueError(f"eps*L = {eps * L} does not divide 1")
    if m % tiles:
        raise ValueError(f"m={m} is not a multiple of the {tiles} tiles")
    n = m // tiles
    h_base = L / n
    if check_resolution and micro.n_grains:
        across = 2 * float(micro.radii.min()) / h_base
        if across < MIN_CELLS_ACROSS_GRAIN:
            raise ResolutionTooCoarse(
                f"smallest grain spans {across:.1f} cells, need {MIN_CELLS_ACROSS_GRAIN}")

    label = rasterize(micro, n)
    jj, ii = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    bj, bi = jj % n, ii % n
    base_index = (bj * n + bi).ravel()
    lab = label[bj, bi]

    # which image of grain ``lab`` a solid cell belongs to
    kept = _grain_images(micro, eps, tiles)
    kept_set = {k: idx for idx, k in enumerate(kept)}
    image = np.full((m, m), -1, dtype=np.int64)
    solid = lab >= 0
    if np.any(solid):
        js, is_ = np.nonzero(solid)
        g = lab[js, is_]
        y0 = (is_ + 0.5) * h_base  # unwrapped base coordinates
        y1 = (js + 0.5) * h_base
        a = np.round((y0 - micro.centers[g, 0]) / L).astype(int)
        b = np.round((y1 - micro.centers[g, 1]) / L).astype(int)
        ids = np.array([kept_set.get((int(gg), int(aa), int(bb)), -1) for gg, aa, bb in zip(g, a, b)],
                       dtype=np.int64)
        image[js, is_] = ids
    mask = image < 0
    h = 1.0 / m
    perimeters = [2 * math.pi * eps * micro.radii[g] for g, _, _ in kept]
    grid = FluidGrid(mask, h, L=1.0, grain_label=image, perimeters=perimeters or None,
                     periodic=False, micro=micro)
    _require_connected(grid)
    dom = PerforatedDomain(eps, micro, grid, n, tiles, base_index, image, kept)
    dom._base_mask = label < 0
    return dom


@dataclass
class EpsilonSolution:
    dom: PerforatedDomain
    u: object
    P: ScalarField
    phi: list
    energy: dict
    report: SolveReport
    forcing: Forcing
    runtime: float = 0.0

    @property
    def grid(self):
        return self.dom.grid


class EpsilonSystem:
    """Assembled coupled operator of the perforated problem."""

    def __init__(self, dom: PerforatedDomain, eq, spec):
        self.dom, self.spec = dom, spec
        grid = dom.grid
        self.grid = grid
        eps = dom.eps
        self.n_cell = [dom.sample_cells(n.values, nc) for n, nc in zip(eq.n0, spec.n_c)]
        G = grid.G.tocsr()
        Gd, dfaces, weights = grid.dirichlet_gradient()
        self.Gd, self.dfaces = Gd.tocsr(), dfaces
        self.W = weights / grid.h ** 2
        cells = [grid.scalar(n) for n in self.n_cell]
        self.Nf = [face_concentration(grid, c) for c in cells]
        outer = dfaces[grid.n_open:]
        inside = np.where(grid.face_a[outer] >= 0, grid.face_a[outer], grid.face_b[outer])
        self.Nd = [np.concatenate([Nf, c.values.ravel()[inside]]) for Nf, c in zip(self.Nf, cells)]

        nv, npr, N = grid.n_open, grid.n_fluid, spec.N
        self.offsets = [0, nv] + [nv + npr * (1 + j) for j in range(N + 1)]
        blocks = [[None] * (N + 2) for _ in range(N + 2)]
        blocks[0][0] = (eps * eps) * grid.A
        blocks[0][1] = G
        blocks[1][0] = G.T
        self.coupling, self.diffusion = [], []
        for j, (zj, Pej) in enumerate(zip(spec.z, spec.Pe)):
            C = (-zj * (sp.diags(self.Nf[j]) @ G)).tocsr()
            Dj = ((zj * zj / Pej) * (self.Gd.T @ sp.diags(self.W * self.Nd[j]) @ self.Gd)).tocsc()
            self.coupling.append(C)
            self.diffusion.append(Dj)
            blocks[0][2 + j] = C
            blocks[2 + j][0] = C.T
            blocks[2 + j][2 + j] = -Dj
        self.K = sp.bmat(blocks, format="csr")
        self._signs = np.concatenate([np.zeros(nv), -np.ones(npr * (N + 1))])
        self._solver = None
        self._stokes = None
        self._species = None

    @property
    def solver(self):
        if self._solver is None:
            self._solver = QuasiDefiniteSolver(self.K, self._signs, project=self._project)
        return self._solver

    def _slice(self, b):
        return slice(self.offsets[b], self.offsets[b + 1])

    def gauss_seidel(self, b, tol=DEFAULT_TOL, max_iter=200):
        """Block Gauss-Seidel: a Stokes solve with the potentials frozen,
        then one Dirichlet diffusion solve per species with the new velocity.

        Iterates until the residual of the full coupled system is below
        ``tol`` relative to ``b``.
        """
        grid, N = self.grid, self.spec.N
        nv, npr = grid.n_open, grid.n_fluid
        if self._species is None:
            # the diffusion blocks are SPD, so column ordering alone is stable
            self._species = [spla.splu(Dj, permc_spec="COLAMD") for Dj in self.diffusion]
        bnorm = float(np.linalg.norm(b)) or 1.0
        x = np.zeros_like(b)
        history = []
        for it in range(1, max_iter + 1):
            rs = b[: nv + npr].copy()
            for j in range(N):
                rs[:nv] -= self.coupling[j] @ x[self._slice(2 + j)]
            x[: nv + npr] += self.stokes_correction(rs - self.K[: nv + npr, : nv + npr] @ x[: nv + npr], tol)
            x[nv: nv + npr] -= x[nv: nv + npr].mean()
            u = x[:nv]
            for j in range(N):
                x[self._slice(2 + j)] = self._species[j].solve(self.coupling[j].T @ u - b[self._slice(2 + j)])
            res = float(np.linalg.norm(b - self.K @ x)) / bnorm
            history.append(res)
            if res <= tol:
                break
        report = SolveReport(it, res, "block-gauss-seidel", res <= tol, history)
        if not report.converged:
            raise NoConvergence(f"block Gauss-Seidel stalled at relative residual {res:.3e}", report)
        return x, report

    def stokes_correction(self, r, tol):
        """Approximate solution of the Stokes block for residual ``r``.

        Up to ``DIRECT_STOKES_LIMIT`` unknowns the block is factorised once.
        Beyond that the sparse LU fill no longer fits in memory and MINRES
        takes over, preconditioned by one AMG V-cycle on the velocity block
        and the identity on pressure.  In the eps^2 scaling the pressure
        Schur complement has an eps-independent spectrum, so the iteration
        count does not grow as eps shrinks.  The outer iteration corrects
        the remaining error.
        """
        nv, npr = self.grid.n_open, self.grid.n_fluid
        if not np.any(r):
            return np.zeros_like(r)
        if self._stokes is None:
            Ks = self.K[: nv + npr, : nv + npr].tocsr()
            if nv + npr <= DIRECT_STOKES_LIMIT:
                signs = np.concatenate([np.zeros(nv), -np.ones(npr)])

                def project(y):
                    y = y.copy()
                    y[nv:] -= y[nv:].mean()
                    return y

                self._stokes = ("direct", QuasiDefiniteSolver(Ks, signs, project=project))
            else:
                ml = pyamg.smoothed_aggregation_solver(Ks[:nv, :nv], symmetry="symmetric", max_coarse=500)
                vcycle = ml.aspreconditioner(cycle="V")

                def apply(y):
                    return np.concatenate([vcycle @ y[:nv], y[nv:]])

                prec = spla.LinearOperator(Ks.shape, matvec=apply, dtype=float)
                self._stokes = ("minres", (Ks, prec))
        kind, solver = self._stokes
        if kind == "direct":
            # the outer iteration absorbs whatever the inner solve leaves
            return solver.solve(r, tol=1e-2 * tol, max_refine=5, strict=False)[0]
        Ks, prec = solver
        dx, info = spla.minres(Ks, r, rtol=MINRES_INNER_TOL, M=prec, maxiter=5000)
        if info < 0:
            raise NoConvergence(f"MINRES breakdown (info={info}) in the Stokes block")
        return dx

    def _project(self, x):
        s = self._slice(1)
        x = x.copy()
        x[s] -= x[s].mean()
        return x

    def rhs(self, forcing: Forcing):
        grid, spec = self.grid, self.spec
        E = np.asarray(forcing.E, dtype=float)
        f = np.asarray(forcing.f_star, dtype=float)
        E_open = grid.constant_force(E)
        d_all = grid.face_dir[self.dfaces]
        E_d = np.where(d_all == 0, E[0], E[1])
        b = np.zeros(self.K.shape[0])
        fv = -grid.constant_force(f)
        for j, zj in enumerate(spec.z):
            fv = fv + zj * self.Nf[j] * E_open
        b[self._slice(0)] = fv
        for j, (zj, Pej) in enumerate(zip(spec.z, spec.Pe)):
            b[self._slice(2 + j)] = (zj * zj / Pej) * (self.Gd.T @ (self.W * self.Nd[j] * E_d))
        return b

    def energy_terms(self, x, forcing: Forcing):
        """Both sides of the energy equality, each as ``h^2``-weighted sums.

        Left: ``eps^2 |grad u|^2 + sum_j (z_j^2/Pe_j) n_j |grad Phi_j|^2``.
        Right: ``-sum_j (z_j^2/Pe_j) n_j E . grad Phi_j
        + sum_j z_j n_j E . u - f* . u``.
        """
        grid, spec, h2 = self.grid, self.spec, self.grid.h ** 2
        eps = self.dom.eps
        u = x[self._slice(0)]
        E = np.asarray(forcing.E, dtype=float)
        f = np.asarray(forcing.f_star, dtype=float)
        E_open = grid.constant_force(E)
        d_all = grid.face_dir[self.dfaces]
        E_d = np.where(d_all == 0, E[0], E[1])
        viscous = eps * eps * fsum_dot(u, grid.A @ u) * h2
        species, drift, electric = [], [], []
        for j, (zj, Pej) in enumerate(zip(spec.z, spec.Pe)):
            g = self.Gd @ x[self._slice(2 + j)]
            wn = self.W * self.Nd[j]
            species.append(zj * zj / Pej * fsum_dot(wn * g, g) * h2)
            drift.append(-zj * zj / Pej * fsum_dot(wn * E_d, g) * h2)
            electric.append(zj * fsum_dot(self.Nf[j] * E_open, u) * h2)
        body = -fsum_dot(grid.constant_force(f), u) * h2
        lhs = math.fsum([viscous] + species)
        rhs = math.fsum(drift + electric + [body])
        scale = max(abs(lhs), abs(rhs))
        return {
            "viscous": viscous,
            "species": species,
            "dissipation": lhs,
            "work": rhs,
            "residual": abs(lhs - rhs) / scale if scale > 0 else 0.0,
        }


def solve_linearized(dom: PerforatedDomain, eq, spec, forcing: Forcing, tol=DEFAULT_TOL,
                     system: EpsilonSystem | None = None, method="gauss-seidel",
                     max_iter=200) -> EpsilonSolution:
    """Solve the coupled perforated problem to relative residual ``tol``.

    ``method`` is ``"gauss-seidel"`` (block iteration, factorises the Stokes
    and diffusion blocks separately) or ``"direct"`` (one factorisation of
    the whole regularised system with refinement; memory-hungry).
    """
    for v in (*forcing.f_star, *forcing.E):
        if not math.isfinite(v):
            raise ValueError("forcing must be finite")
    t0 = time.perf_counter()
    system = system or EpsilonSystem(dom, eq, spec)
    b = system.rhs(forcing)
    if not np.any(b):
        x = np.zeros_like(b)
        report = SolveReport(0, 0.0, method)
    elif method == "direct":
        x, report = system.solver.solve(b, tol)
    elif method == "gauss-seidel":
        x, report = system.gauss_seidel(b, tol, max_iter)
    else:
        raise ValueError(f"unknown method {method!r}")
    grid = dom.grid
    sol = EpsilonSolution(
        dom, grid.vector(x[system._slice(0)]), grid.scalar(x[system._slice(1)]),
        [grid.scalar(x[system._slice(2 + j)]) for j in range(spec.N)],
        system.energy_terms(x, forcing), report, forcing)
    sol.runtime = time.perf_counter() - t0
    sol._x, sol._system = x, system
    return sol


# ---------------------------------------------------------------------------
# reconstruction


def macro_gradients(macro, x, y):
    """Gradients of the bilinear interpolants of ``p0`` and ``Phi_j0`` at
    points ``(x, y)``: returns ``(gp, [gphi_j])`` with shapes ``(2, npts)``."""
    m, h = macro.m, macro.h
    x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
    y = np.clip(np.asarray(y, dtype=float), 0.0, 1.0)
    i = np.minimum((x / h).astype(int), m - 1)
    j = np.minimum((y / h).astype(int), m - 1)
    s, t = x / h - i, y / h - j

    def grad(U):
        u00, u10, u01, u11 = U[j, i], U[j, i + 1], U[j + 1, i], U[j + 1, i + 1]
        gx = ((u10 - u00) * (1 - t) + (u11 - u01) * t) / h
        gy = ((u01 - u00) * (1 - s) + (u11 - u10) * s) / h
        return np.stack([gx, gy])

    return grad(macro.p0), [grad(phi) for phi in macro.phi0]


def reconstruct(macro, cells, eq, dom: PerforatedDomain, forcing: Forcing | None = None):
    """Two-scale reconstruction on the open faces of ``dom``.

    ``u_rec = sum_k [ -v^{0,k} (d_k p0 + f_k) + sum_i v^{i,k} (E_k + d_k Phi_i0) ]``
    with the cell velocities sampled periodically; the species gradient
    ``grad Phi_j0 + sum_k [...]`` uses the corrector gradients with the same
    weights.  Returns ``(u_rec, [grad_phi_rec_j])`` as open-face arrays of
    the perforated grid (only the normal component lives on each face).
    """
    forcing = forcing or Forcing()
    base = cells[(0, 1)].v.grid
    if base.nx != dom.n_base or base.ny != dom.n_base or not np.array_equal(
            base.cell_mask.ravel(), dom.micro_mask.ravel()):
        raise ConfigMismatch("cell solutions were computed on a different base grid")
    N = len(eq.n0)
    grid = dom.grid
    fx, fy = grid.face_centers()
    f = grid.open_faces
    d = grid.face_dir[f]
    gp, gphi = macro_gradients(macro, fx[f], fy[f])
    keys, w = _drive_weights(gp, gphi, forcing, N)

    wrap = dom.wrap_faces()
    # base-grid face values including closed faces (zero there)
    base_faces = {key: s.v.face_values() for key, s in cells.items()}
    base_theta = {}
    for key, s in cells.items():
        for j in range(N):
            gj = np.zeros(base.n_faces)
            gj[base.open_faces] = s.theta_gradient(j)
            base_theta[key + (j,)] = gj

    u = np.zeros(f.size)
    gphi_rec = [np.where(d == 0, gphi[j][0], gphi[j][1]) for j in range(N)]
    # faces closed in the base grid (inside dropped grains) pick up zeros
    for key, wk in zip(keys, w):
        u += base_faces[key][wrap] * wk
        for j in range(N):
            gphi_rec[j] += base_theta[key + (j,)][wrap] * wk
    return u, gphi_rec


def _drive_weights(gp, gphi, forcing, N):
    """Weights of the ``2(N+1)`` cell solutions, keyed like the cell dict."""
    fs = np.asarray(forcing.f_star, dtype=float)
    E = np.asarray(forcing.E, dtype=float)
    keys, w = [], []
    for k in (1, 2):
        keys.append((0, k))
        w.append(-(gp[k - 1] + fs[k - 1]))
    for i in range(N):
        for k in (1, 2):
            keys.append((i + 1, k))
            w.append(E[k - 1] + gphi[i][k - 1])
    return keys, np.array(w)


def homogenized_energy(macro, cells, eq, spec, forcing: Forcing | None = None):
    """Two-scale dissipation ``int_G < |grad_y u0|^2 + sum_j (z_j^2/Pe_j)
    n_j |grad Phi_j0 + Phi_j1|^2 >`` from macro and cell data.

    The cell average is a quadratic form in the local macro gradients, so
    Gram matrices of the cell solutions are formed once and the macro
    integral uses element midpoints.  Returns ``(viscous, [species_j])``.
    """
    forcing = forcing or Forcing()
    base = cells[(0, 1)].v.grid
    N = spec.N
    area = base.nx * base.ny
    m = macro.m
    c = (np.arange(m) + 0.5) / m
    X, Y = np.meshgrid(c, c, indexing="xy")
    gp, gphi = macro_gradients(macro, X.ravel(), Y.ravel())
    keys, w = _drive_weights(gp, gphi, forcing, N)
    V = np.stack([cells[k].v.open_values() for k in keys], axis=1)
    gram_v = V.T @ (base.A @ V) / area
    viscous = float(np.einsum("ap,ab,bp->p", w, gram_v, w).sum()) / m ** 2
    d = base.face_dir[base.open_faces]
    Nf = [face_concentration(base, n) for n in eq.n0]
    species = []
    for j in range(N):
        basis = np.stack([(d == 0).astype(float), (d == 1).astype(float)]
                         + [cells[k].theta_gradient(j) for k in keys], axis=1)
        gram = basis.T @ (Nf[j][:, None] * basis) / area
        coef = np.concatenate([gphi[j], w], axis=0)
        val = float(np.einsum("ap,ab,bp->p", coef, gram, coef).sum()) / m ** 2
        species.append(spec.z[j] ** 2 / spec.Pe[j] * val)
    return viscous, species


# ---------------------------------------------------------------------------
# metrics


def _rel(num, den):
    if den == 0.0:
        return 0.0 if num == 0.0 else math.inf
    return math.sqrt(num / den)


def convergence_metrics(sol: EpsilonSolution, rec, dom: PerforatedDomain, homog_energy=None) -> dict:
    """Errors between the resolved solution and the reconstruction.

    ``rec`` is the ``(u_rec, grad_phi_rec)`` pair from :func:`reconstruct`.
    L2 norms use the face control areas ``h^2``.  A zero reference with a
    zero error is reported as 0.
    """
    grid = dom.grid
    if sol.grid is not grid:
        raise ConfigMismatch("solution and domain grids differ")
    u_rec, g_rec = rec
    u = sol.u.open_values()
    h2 = grid.h ** 2
    du = u - u_rec
    vel_err = _rel(fsum_dot(du, du), fsum_dot(u_rec, u_rec))
    sp_err = []
    for j, phi in enumerate(sol.phi):
        g = grid.G @ phi.fluid_values()
        dg = g - g_rec[j]
        sp_err.append(_rel(fsum_dot(dg, dg), fsum_dot(g_rec[j], g_rec[j])))
    u_l2 = math.sqrt(fsum_dot(u, u) * h2)
    grad_u = math.sqrt(fsum_dot(u, grid.A @ u) * h2)
    poincare = u_l2 / (dom.eps * grad_u) if grad_u > 0 else 0.0
    return {
        "eps": dom.eps,
        "m": dom.m,
        "n_grains": dom.n_grains,
        "velocity_error": vel_err,
        "species_gradient_error": sp_err,
        "energy_residual": sol.energy["residual"],
        "dissipation": sol.energy["dissipation"],
        "homogenized_dissipation": homog_energy,
        "u_l2": u_l2,
        "eps_grad_u": dom.eps * grad_u,
        "poincare_ratio": poincare,
        "runtime": sol.runtime,
    }


def write_metrics_csv(path, rows, config_hash=None):
    """One row per eps; species errors are split into columns."""
    if not rows:
        names = []
    else:
        names = [f"species_gradient_error_{j + 1}" for j in range(len(rows[0]["species_gradient_error"]))]
    cols = ["eps", "m", "n_grains", "velocity_error", *names, "energy_residual", "dissipation",
            "homogenized_dissipation", "u_l2", "eps_grad_u", "poincare_ratio", "runtime"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols + ["config_hash"])
        for r in rows:
            flat = dict(r)
            for j, v in enumerate(r["species_gradient_error"]):
                flat[f"species_gradient_error_{j + 1}"] = v
            w.writerow([repr(flat[c]) if isinstance(flat[c], float) else flat[c] for c in cols] + [config_hash or ""])
