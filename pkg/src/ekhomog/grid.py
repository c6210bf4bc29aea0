"""Staggered (MAC) grid operators restricted to a fluid phase.

Scalars live at cell centres, velocity components on cell faces.  Arrays
are stored ``[j, i]`` with ``j`` the y index and ``i`` the x index, so a
C-order ravel runs x fastest.

Face numbering: x-faces first, then y-faces.  x-face ``(j, i)`` separates
cell ``(j, i-1)`` from cell ``(j, i)``; y-face ``(j, i)`` separates
``(j-1, i)`` from ``(j, i)``.  On a periodic grid there are ``nx`` x-faces
per row (index ``i-1`` wraps); on a bounded grid there are ``nx + 1`` and the
first/last faces lie on the outer boundary.

A face is *open* when both neighbouring cells exist and are fluid.  Velocity
unknowns and corrector gradients live on open faces only; everything else
is no-slip / no-flux by construction, which is what makes ``div = -grad^T``
hold exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import GridMismatch, InconsistentRhs, NoConvergence

DEFAULT_TOL = 1e-10


def fsum_dot(a, b=None):
    """Correctly rounded sum of ``a*b`` (or of ``a``)."""
    a = np.asarray(a, dtype=float).ravel()
    if b is not None:
        a = a * np.asarray(b, dtype=float).ravel()
    return math.fsum(a.tolist())


@dataclass
class SolveReport:
    iterations: int
    residual: float
    method: str
    converged: bool = True
    history: list = field(default_factory=list)

    def as_dict(self):
        return {
            "iterations": int(self.iterations),
            "residual": float(self.residual),
            "method": self.method,
            "converged": bool(self.converged),
        }


class MacGrid:
    """Fluid-restricted MAC grid on a periodic torus or a walled box."""

    def __init__(self, cell_mask, h, periodic=True):
        mask = np.ascontiguousarray(cell_mask, dtype=bool)
        if mask.ndim != 2:
            raise ValueError("cell_mask must be 2-D")
        self.cell_mask = mask
        self.cell_mask.setflags(write=False)
        self.ny, self.nx = mask.shape
        self.h = float(h)
        self.periodic = bool(periodic)

        ny, nx = self.ny, self.nx
        self.n_cells = nx * ny
        flat = mask.ravel()
        self.fluid_cells = np.flatnonzero(flat)
        self.n_fluid = self.fluid_cells.size
        self.cell_index = np.full(self.n_cells, -1, dtype=np.int64)
        self.cell_index[self.fluid_cells] = np.arange(self.n_fluid)

        jj, ii = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
        if periodic:
            self.nxf, self.nyf = nx, ny
            xa = (jj * nx + (ii - 1) % nx).ravel()
            xb = (jj * nx + ii).ravel()
            ya = (((jj - 1) % ny) * nx + ii).ravel()
            yb = (jj * nx + ii).ravel()
        else:
            self.nxf, self.nyf = nx + 1, ny + 1
            jx, ix = np.meshgrid(np.arange(ny), np.arange(nx + 1), indexing="ij")
            xa = np.where(ix - 1 >= 0, jx * nx + ix - 1, -1).ravel()
            xb = np.where(ix < nx, jx * nx + np.minimum(ix, nx - 1), -1).ravel()
            jy, iy = np.meshgrid(np.arange(ny + 1), np.arange(nx), indexing="ij")
            ya = np.where(jy - 1 >= 0, (jy - 1) * nx + iy, -1).ravel()
            yb = np.where(jy < ny, np.minimum(jy, ny - 1) * nx + iy, -1).ravel()
        self.n_xfaces = ny * self.nxf
        self.n_yfaces = self.nyf * nx
        self.n_faces = self.n_xfaces + self.n_yfaces
        self.face_a = np.concatenate([xa, ya]).astype(np.int64)
        self.face_b = np.concatenate([xb, yb]).astype(np.int64)
        self.face_dir = np.concatenate(
            [np.zeros(self.n_xfaces, dtype=np.int8), np.ones(self.n_yfaces, dtype=np.int8)]
        )

        fa = np.where(self.face_a >= 0, flat[np.maximum(self.face_a, 0)], False)
        fb = np.where(self.face_b >= 0, flat[np.maximum(self.face_b, 0)], False)
        # a y-face of a one-row periodic grid joins a cell to itself
        self_loop = self.face_a == self.face_b
        self.face_open = fa & fb & ~self_loop
        self.face_wall = (fa ^ fb) & (self.face_a >= 0) & (self.face_b >= 0)
        self.face_outer = ((self.face_a < 0) & fb) | ((self.face_b < 0) & fa)
        self.open_faces = np.flatnonzero(self.face_open)
        self.n_open = self.open_faces.size
        self.face_index = np.full(self.n_faces, -1, dtype=np.int64)
        self.face_index[self.open_faces] = np.arange(self.n_open)

    # ------------------------------------------------------------------ layout
    def same_as(self, other):
        return (
            isinstance(other, MacGrid)
            and self.periodic == other.periodic
            and self.h == other.h
            and self.cell_mask.shape == other.cell_mask.shape
            and np.array_equal(self.cell_mask, other.cell_mask)
        )

    def check_same(self, other):
        if other is not self and not self.same_as(other):
            raise GridMismatch("fields live on different grids")

    @property
    def porosity(self):
        return self.n_fluid / self.n_cells

    def cell_centers(self):
        """Return ``(x, y)`` arrays of shape ``(ny, nx)``."""
        h = self.h
        y, x = np.meshgrid((np.arange(self.ny) + 0.5) * h, (np.arange(self.nx) + 0.5) * h, indexing="ij")
        return x, y

    def face_centers(self):
        """Coordinates of every face, in global face order."""
        h = self.h
        jx, ix = np.meshgrid(np.arange(self.ny), np.arange(self.nxf), indexing="ij")
        jy, iy = np.meshgrid(np.arange(self.nyf), np.arange(self.nx), indexing="ij")
        x = np.concatenate([(ix * h).ravel(), ((iy + 0.5) * h).ravel()])
        y = np.concatenate([((jx + 0.5) * h).ravel(), (jy * h).ravel()])
        return x, y

    # ------------------------------------------------------------ conversions
    def scalar(self, vec):
        """Wrap a vector of fluid-cell values as a :class:`ScalarField`."""
        vals = np.zeros(self.n_cells)
        vals[self.fluid_cells] = vec
        return ScalarField(self, vals.reshape(self.ny, self.nx))

    def vector(self, vec):
        """Wrap a vector of open-face values as a :class:`MacVectorField`."""
        vals = np.zeros(self.n_faces)
        vals[self.open_faces] = vec
        return self.vector_from_faces(vals)

    def vector_from_faces(self, vals):
        u = vals[: self.n_xfaces].reshape(self.ny, self.nxf).copy()
        v = vals[self.n_xfaces:].reshape(self.nyf, self.nx).copy()
        return MacVectorField(self, u, v)

    def constant_force(self, vector):
        """Open-face values of a constant vector field."""
        vector = np.asarray(vector, dtype=float)
        d = self.face_dir[self.open_faces]
        return np.where(d == 0, vector[0], vector[1])

    # --------------------------------------------------------------- operators
    @cached_property
    def G(self):
        """Gradient: fluid-cell scalars -> open faces, shape ``(n_open, n_fluid)``."""
        f = self.open_faces
        rows = np.concatenate([np.arange(self.n_open), np.arange(self.n_open)])
        cols = np.concatenate([self.cell_index[self.face_b[f]], self.cell_index[self.face_a[f]]])
        vals = np.concatenate([np.full(self.n_open, 1.0 / self.h), np.full(self.n_open, -1.0 / self.h)])
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.n_open, self.n_fluid))

    @cached_property
    def D(self):
        """Divergence on fluid cells; exactly ``-G.T``."""
        return (-self.G.T).tocsr()

    @cached_property
    def laplacian(self):
        """Scalar ``-lap`` with no-flux walls, ``G^T G`` (positive semi-definite)."""
        return (self.G.T @ self.G).tocsr()

    def dirichlet_gradient(self):
        """Gradient including outer-boundary faces with a zero Dirichlet value.

        Returns ``(Gd, faces, weights)``: the matrix maps fluid-cell values to
        the listed faces, and ``weights`` are the face control areas (``h^2``
        inside, ``h^2/2`` on the outer boundary, where the gradient is taken
        over half a cell).
        """
        h = self.h
        outer = np.flatnonzero(self.face_outer)
        faces = np.concatenate([self.open_faces, outer])
        Go = self.G.tocoo()
        a, b = self.face_a[outer], self.face_b[outer]
        inside = np.where(a >= 0, a, b)
        sign = np.where(a >= 0, -1.0, 1.0)  # value lives on the minus side when a >= 0
        rows = np.concatenate([Go.row, self.n_open + np.arange(outer.size)])
        cols = np.concatenate([Go.col, self.cell_index[inside]])
        vals = np.concatenate([Go.data, sign * 2.0 / h])
        Gd = sp.csr_matrix((vals, (rows, cols)), shape=(faces.size, self.n_fluid))
        weights = np.concatenate([np.full(self.n_open, h * h), np.full(outer.size, 0.5 * h * h)])
        return Gd, faces, weights

    def _face_neighbours(self):
        """Neighbour face ids of every open face: ``(normal-, normal+, tang-, tang+)``.

        ``-1`` marks a neighbour outside a bounded domain.
        """
        ny, nx, nxf, nyf = self.ny, self.nx, self.nxf, self.nyf
        f = self.open_faces
        d = self.face_dir[f]
        out = np.full((f.size, 4), -1, dtype=np.int64)
        isx = d == 0
        fx = f[isx]
        j, i = np.divmod(fx, nxf)
        fy = f[~isx] - self.n_xfaces
        jy, iy = np.divmod(fy, nx)
        if self.periodic:
            nb_x = np.stack([j * nxf + (i - 1) % nx, j * nxf + (i + 1) % nx,
                             ((j - 1) % ny) * nxf + i, ((j + 1) % ny) * nxf + i], axis=1)
            nb_y = np.stack([((jy - 1) % ny) * nx + iy, ((jy + 1) % ny) * nx + iy,
                             jy * nx + (iy - 1) % nx, jy * nx + (iy + 1) % nx], axis=1)
        else:
            def pick(cond, val):
                return np.where(cond, val, -1)
            nb_x = np.stack([pick(i - 1 >= 0, j * nxf + i - 1), pick(i + 1 < nxf, j * nxf + i + 1),
                             pick(j - 1 >= 0, (j - 1) * nxf + i), pick(j + 1 < ny, (j + 1) * nxf + i)], axis=1)
            nb_y = np.stack([pick(jy - 1 >= 0, (jy - 1) * nx + iy), pick(jy + 1 < nyf, (jy + 1) * nx + iy),
                             pick(iy - 1 >= 0, jy * nx + iy - 1), pick(iy + 1 < nx, jy * nx + iy + 1)], axis=1)
        out[isx] = nb_x
        out[~isx] = np.where(nb_y >= 0, nb_y + self.n_xfaces, -1)
        return out

    @cached_property
    def A(self):
        """Velocity ``-lap`` on open faces (symmetric).

        A closed normal neighbour is a no-slip face located exactly there
        (weight ``1/h^2``); a closed or missing tangential neighbour puts the
        wall half a cell away and is treated by reflection (``2/h^2``).
        """
        h2 = self.h * self.h
        nb = self._face_neighbours()
        rows, cols, vals = [], [], []
        diag = np.zeros(self.n_open)
        own = self.open_faces
        for k in range(4):
            g = nb[:, k]
            valid = g >= 0
            g_open = np.zeros(g.size, dtype=bool)
            g_open[valid] = self.face_open[g[valid]]
            self_pair = g == own
            coupled = g_open & ~self_pair
            closed = ~g_open & ~self_pair
            r = np.flatnonzero(coupled)
            rows.append(r)
            cols.append(self.face_index[g[coupled]])
            vals.append(np.full(r.size, -1.0 / h2))
            diag[coupled] += 1.0 / h2
            weight = 1.0 if k < 2 else 2.0
            diag[closed] += weight / h2
        rows.append(np.arange(self.n_open))
        cols.append(np.arange(self.n_open))
        vals.append(diag)
        A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(self.n_open, self.n_open))
        return A

    @property
    def velocity_singular(self):
        """True when some velocity component sees no wall at all."""
        return self.periodic and not np.any(~self.cell_mask)

    # ----------------------------------------------------- field-level wrappers
    def grad(self, s):
        self.check_same(s.grid)
        return self.vector(self.G @ s.fluid_values())

    def div(self, v):
        self.check_same(v.grid)
        return self.scalar(self.D @ v.open_values())

    def lap(self, s):
        self.check_same(s.grid)
        return self.scalar(-(self.laplacian @ s.fluid_values()))


@dataclass
class ScalarField:
    grid: MacGrid
    values: np.ndarray

    def fluid_values(self):
        return self.values.ravel()[self.grid.fluid_cells]

    def inner(self, other):
        self.grid.check_same(other.grid)
        return fsum_dot(self.fluid_values(), other.fluid_values()) * self.grid.h ** 2


@dataclass
class MacVectorField:
    grid: MacGrid
    u: np.ndarray
    v: np.ndarray

    def face_values(self):
        return np.concatenate([self.u.ravel(), self.v.ravel()])

    def open_values(self):
        return self.face_values()[self.grid.open_faces]

    def inner(self, other):
        self.grid.check_same(other.grid)
        return fsum_dot(self.open_values(), other.open_values()) * self.grid.h ** 2


# ---------------------------------------------------------------------------
# linear solvers


def _amg_preconditioner(A):
    import pyamg

    ml = pyamg.smoothed_aggregation_solver(A.tocsr(), symmetry="symmetric", max_coarse=200)
    return ml.aspreconditioner(cycle="V")


def solve_spd(operator, rhs, tol=DEFAULT_TOL, max_iter=None, singular=False, x0=None,
              preconditioner="auto", callback=None):
    """Preconditioned conjugate gradients for an SPD (or PSD) sparse matrix.

    With ``singular=True`` the operator is assumed to have the constant
    vector as its kernel (pure Neumann problem): the right-hand side must be
    orthogonal to it and the returned solution has zero mean.
    """
    A = sp.csr_matrix(operator)
    b = np.asarray(rhs, dtype=float)
    n = b.size
    if max_iter is None:
        max_iter = max(50 * int(math.isqrt(max(n, 1))), 100)
    bnorm = float(np.linalg.norm(b))
    if singular:
        mean = b.sum() / n
        if abs(mean) * math.sqrt(n) > 1e-8 * max(bnorm, 1e-300):
            raise InconsistentRhs("right-hand side is not orthogonal to the constant kernel")
        b = b - mean
    if bnorm == 0.0:
        return np.zeros(n), SolveReport(0, 0.0, "cg")

    M = None
    if preconditioner == "amg" or (preconditioner == "auto" and n > 4000):
        Aprec = A + sp.identity(n) * (1e-10 * abs(A.diagonal()).max()) if singular else A
        M = _amg_preconditioner(Aprec)
    history = []

    def cb(xk):
        history.append(xk.copy() if callback is not None else None)
        if callback is not None:
            callback(xk)

    x, info = spla.cg(A, b, x0=x0, rtol=tol, atol=0.0, maxiter=max_iter, M=M, callback=cb)
    if singular:
        x = x - x.mean()
    res = float(np.linalg.norm(b - A @ x)) / bnorm
    report = SolveReport(len(history), res, "pcg-amg" if M is not None else "cg", info == 0 and res <= tol * 10)
    if not report.converged:
        raise NoConvergence(f"CG stopped at relative residual {res:.3e}", report)
    return x, report


class QuasiDefiniteSolver:
    """Direct solver for symmetric saddle systems with iterative refinement.

    ``K`` is symmetric with a positive semi-definite leading block and a
    negative semi-definite trailing block.  The factorised matrix is
    ``K + delta * diag(signs)``, which is symmetric quasi-definite and hence
    stable under any symmetric ordering without pivoting; refinement
    against the exact ``K`` then removes the O(delta) perturbation.
    ``project`` (optional) removes kernel components after every step.
    """

    def __init__(self, K, signs, delta=1e-8, project=None):
        self.K = sp.csr_matrix(K)
        scale = max(float(abs(self.K.diagonal()).max()), 1.0)
        M = (self.K + sp.diags(delta * scale * np.asarray(signs, dtype=float))).tocsc()
        self.lu = spla.splu(M, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                            options=dict(SymmetricMode=True))
        self.project = project

    def solve(self, b, tol=DEFAULT_TOL, max_refine=30, strict=True):
        """Refined solve; ``strict=False`` returns the best iterate instead of
        raising when ``tol`` is not reached (inner solves of an outer loop)."""
        b = np.asarray(b, dtype=float)
        if b.ndim == 2:
            cols = [self.solve(b[:, k], tol, max_refine, strict) for k in range(b.shape[1])]
            return np.stack([c[0] for c in cols], axis=1), cols
        bnorm = float(np.linalg.norm(b))
        if bnorm == 0.0:
            return np.zeros_like(b), SolveReport(0, 0.0, "qd-lu")
        x = np.zeros_like(b)
        r = b
        history = []
        for it in range(1, max_refine + 1):
            x = x + self.lu.solve(r)
            if self.project is not None:
                x = self.project(x)
            r = b - self.K @ x
            res = float(np.linalg.norm(r)) / bnorm
            history.append(res)
            # stop once converged and refinement has stalled at round-off
            if res <= tol and (len(history) < 2 or res > 0.5 * history[-2] or res < 1e-3 * tol):
                break
        report = SolveReport(it, res, "qd-lu", res <= tol, history)
        if strict and not report.converged:
            raise NoConvergence(f"refinement stalled at relative residual {res:.3e}", report)
        return x, report


def stokes_system(grid, viscosity=1.0):
    """Symmetric Stokes saddle matrix and its regularisation signs."""
    K = sp.bmat([[grid.A * viscosity, grid.G], [grid.G.T, None]], format="csr")
    signs = np.concatenate([np.full(grid.n_open, 1.0 if grid.velocity_singular else 0.0),
                            -np.ones(grid.n_fluid)])
    return K, signs


def velocity_mean_projector(grid, nv_offset=0):
    """Remove per-direction velocity means (gauge on fully periodic grids)."""
    d = grid.face_dir[grid.open_faces]
    sel = [nv_offset + np.flatnonzero(d == k) for k in (0, 1)]

    def project(x):
        x = x.copy()
        for s in sel:
            x[s] -= x[s].mean()
        return x

    return project


def solve_stokes(grid, force, tol=DEFAULT_TOL, method="direct", viscosity=1.0, max_iter=None):
    """Solve ``-nu lap v + grad p = force``, ``div v = 0`` on the fluid.

    ``force`` is a :class:`MacVectorField` or an array of open-face values.
    The pressure is returned with zero mean over fluid cells.  ``method`` is
    ``"direct"`` (regularised sparse factorisation with refinement),
    ``"uzawa"`` (conjugate gradients on the pressure Schur complement with a
    factorised velocity block) or ``"dense"`` (dense LU, small grids only).
    On a grid without solid cells the mean of the force is not balanced by
    any wall; it is removed and the velocity returned with zero mean.
    """
    f = force.open_values() if isinstance(force, MacVectorField) else np.asarray(force, dtype=float)
    f = f.copy()
    nv, npr = grid.n_open, grid.n_fluid
    if grid.velocity_singular:
        f = velocity_mean_projector(grid)(f)
    fnorm = float(np.linalg.norm(f))
    if fnorm == 0.0:
        return grid.vector(np.zeros(nv)), grid.scalar(np.zeros(npr)), SolveReport(0, 0.0, method)
    if method == "uzawa":
        vel, p, report = _stokes_uzawa(grid, f, tol, viscosity, max_iter)
    elif method in ("direct", "dense"):
        K, signs = stokes_system(grid, viscosity)
        rhs = np.zeros(K.shape[0])
        rhs[:nv] = f
        if method == "dense":
            x, report = _dense_saddle(grid, K, rhs)
        else:
            proj = velocity_mean_projector(grid) if grid.velocity_singular else None
            x, report = QuasiDefiniteSolver(K, signs, project=proj).solve(rhs, tol)
        vel, p = x[:nv], x[nv:nv + npr]
    else:
        raise ValueError(f"unknown Stokes method {method!r}")
    p = p - p.mean()
    if grid.velocity_singular:
        vel = velocity_mean_projector(grid)(vel)
    mom = viscosity * (grid.A @ vel) + grid.G @ p - f
    res = max(float(np.linalg.norm(mom)), float(np.linalg.norm(grid.D @ vel))) / fnorm
    report.residual = res
    report.converged = res <= tol
    if not report.converged:
        raise NoConvergence(f"Stokes residual {res:.3e} above tolerance", report)
    return grid.vector(vel), grid.scalar(p), report


def _dense_saddle(grid, K, rhs):
    """Dense oracle path: border with zero-sum constraints and solve exactly."""
    if grid.n_cells > 64 * 64:
        raise ValueError("dense path is limited to grids of at most 64x64 cells")
    nv, npr = grid.n_open, grid.n_fluid
    sets = [nv + np.arange(npr)]
    if grid.velocity_singular:
        d = grid.face_dir[grid.open_faces]
        sets += [np.flatnonzero(d == 0), np.flatnonzero(d == 1)]
    n = K.shape[0]
    C = np.zeros((n, len(sets)))
    for k, s in enumerate(sets):
        C[s, k] = 1.0
    big = np.block([[K.toarray(), C], [C.T, np.zeros((len(sets), len(sets)))]])
    x = np.linalg.solve(big, np.concatenate([rhs, np.zeros(len(sets))]))[:n]
    return x, SolveReport(1, 0.0, "dense")


def _stokes_uzawa(grid, f, tol, viscosity, max_iter):
    if grid.velocity_singular:
        raise ValueError("Uzawa path needs a wall-bounded velocity block")
    A = (grid.A * viscosity).tocsc()
    lu = spla.splu(A)
    G = grid.G
    n = grid.n_fluid
    # Schur complement S = G^T A^{-1} G (positive semi-definite, constant kernel)
    S = spla.LinearOperator((n, n), matvec=lambda q: G.T @ lu.solve(G @ q), dtype=float)
    b = G.T @ lu.solve(f)
    b = b - b.mean()
    if max_iter is None:
        max_iter = 50 * max(grid.nx, grid.ny)
    count = [0]

    def cb(_):
        count[0] += 1

    p, info = spla.cg(S, b, rtol=tol * 1e-2, atol=0.0, maxiter=max_iter, callback=cb)
    p = p - p.mean()
    vel = lu.solve(f - G @ p)
    return vel, p, SolveReport(count[0], 0.0, "uzawa-cg", info == 0)


# ---------------------------------------------------------------------------
# EKFIELD1 file format

_MAGIC = "EKFIELD1"


def write_field(path, field, L=None, config_hash=None):
    """Write a scalar or MAC vector field in the EKFIELD1 format.

    Header lines are ASCII and terminated by a line reading ``end``; the
    payload follows as little-endian float64.  For periodic grids the x-face
    block carries ``nx + 1`` columns (the last repeats the first) and the
    y-face block ``ny + 1`` rows, so both grid kinds share one layout.
    """
    grid = field.grid
    if L is None:
        L = grid.h * grid.nx
    if isinstance(field, ScalarField):
        kind = "scalar"
        payload = field.values.ravel()
    else:
        kind = "vector_mac"
        u, v = field.u, field.v
        if grid.periodic:
            u = np.concatenate([u, u[:, :1]], axis=1)
            v = np.concatenate([v, v[:1, :]], axis=0)
        payload = np.concatenate([u.ravel(), v.ravel()])
    lines = [_MAGIC, f"kind={kind}", f"nx={grid.nx} ny={grid.ny} h={grid.h!r} L={float(L)!r}",
             f"periodic={int(grid.periodic)}"]
    if config_hash:
        lines.append(f"config_hash={config_hash}")
    lines.append("end")
    head = ("\n".join(lines) + "\n").encode("ascii")
    Path(path).write_bytes(head + np.asarray(payload, dtype="<f8").tobytes())


def read_field(path):
    """Read an EKFIELD1 file.

    Returns ``(header, arrays)`` where ``arrays`` is ``(values,)`` for a
    scalar and ``(u, v)`` for a MAC vector field, shaped with the periodic
    duplicate column/row included.
    """
    raw = Path(path).read_bytes()
    header = {}
    pos = 0
    first = True
    while True:
        end = raw.index(b"\n", pos)
        line = raw[pos:end].decode("ascii")
        pos = end + 1
        if first:
            if line != _MAGIC:
                raise ValueError(f"{path}: not an EKFIELD1 file")
            first = False
            continue
        if line == "end":
            break
        for token in line.split():
            k, _, v = token.partition("=")
            header[k] = v
    data = np.frombuffer(raw[pos:], dtype="<f8")
    nx, ny = int(header["nx"]), int(header["ny"])
    header["nx"], header["ny"] = nx, ny
    header["h"], header["L"] = float(header["h"]), float(header["L"])
    if header["kind"] == "scalar":
        return header, (data.reshape(ny, nx).copy(),)
    nu = (nx + 1) * ny
    return header, (data[:nu].reshape(ny, nx + 1).copy(), data[nu:].reshape(ny + 1, nx).copy())

