"""Homogenised transport problem on the unit square.

Unknowns per node are ``U = (p, mu_1, ..., mu_N)`` with ``mu_j = -z_j Phi_j``
(the potential part of the electrochemical potential).  With the driving
vector ``F = grad U + F0``, ``F0 = (f*, -z_1 E, ..., -z_N E)``, the fluxes are
``(u, j_1, ..., j_N) = -B F`` and the system reads ``div(-B F) = S``.  The
pressure carries a no-flux condition and a zero-mean gauge, the potentials
vanish on the boundary.

Discretisation: bilinear (Q1) finite elements on an ``m x m`` grid of
squares, element integrals by 2x2 Gauss quadrature.  For a constant tensor
the stiffness matrix is symmetric positive definite on the gauge-fixed
space whenever the symmetric part of ``B`` is.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import NonSpdTensor, NoConvergence
from .grid import DEFAULT_TOL, SolveReport, fsum_dot
from .model import Forcing
from .onsager import OnsagerTensor, check_onsager

_GAUSS = np.array([0.5 - 0.5 / math.sqrt(3.0), 0.5 + 0.5 / math.sqrt(3.0)])


@dataclass
class MacroProblem:
    """Macroscopic problem data.

    ``source(x, y)`` returns an array of shape ``(N+1,) + x.shape`` and
    ``neumann_flux(x, y, nx, ny)`` the outward normal flux of the pressure
    equation; both default to zero and exist for manufactured solutions.
    ``dirichlet=False`` replaces the potential condition by no-flux (test mode).
    """

    m: int
    tensor: OnsagerTensor
    forcing: Forcing = field(default_factory=Forcing)
    dirichlet: bool = True
    source: Optional[Callable] = None
    neumann_flux: Optional[Callable] = None

    @property
    def B(self):
        return self.tensor.B

    @property
    def F0(self):
        f, E = self.forcing.f_star, self.forcing.E
        parts = [np.asarray(f, dtype=float)] + [-zj * np.asarray(E, dtype=float) for zj in self.tensor.z]
        return np.concatenate(parts)


@dataclass
class MacroSolution:
    """Nodal fields on the ``(m+1) x (m+1)`` vertex grid, indexed ``[j, i]``."""

    m: int
    p0: np.ndarray
    phi0: list
    mu_tilde: np.ndarray
    report: SolveReport
    u: np.ndarray | None = None
    jj: list | None = None
    mu: list | None = None

    @property
    def h(self):
        return 1.0 / self.m

    def nodes(self):
        s = np.linspace(0.0, 1.0, self.m + 1)
        X, Y = np.meshgrid(s, s, indexing="xy")
        return X, Y


def _shape_gradients():
    """Gradients of the four reference bilinear shape functions at the four
    Gauss points, scaled for a unit square: shape ``(4 pts, 4 nodes, 2)``.

    Local node order: (0,0), (1,0), (0,1), (1,1).
    """
    out = np.zeros((4, 4, 2))
    q = 0
    for gy in _GAUSS:
        for gx in _GAUSS:
            out[q] = [[-(1 - gy), -(1 - gx)], [(1 - gy), -gx], [-gy, (1 - gx)], [gy, gx]]
            q += 1
    return out


def _shape_values():
    out = np.zeros((4, 4))
    q = 0
    for gy in _GAUSS:
        for gx in _GAUSS:
            out[q] = [(1 - gx) * (1 - gy), gx * (1 - gy), (1 - gx) * gy, gx * gy]
            q += 1
    return out


def _gauss_points(m):
    """Physical Gauss points of every element: arrays ``(m, m, 4)``."""
    h = 1.0 / m
    j, i = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    xs, ys = [], []
    for gy in _GAUSS:
        for gx in _GAUSS:
            xs.append((i + gx) * h)
            ys.append((j + gy) * h)
    return np.stack(xs, axis=-1), np.stack(ys, axis=-1)


def _element_nodes(m):
    j, i = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    n0 = j * (m + 1) + i
    return np.stack([n0, n0 + 1, n0 + m + 1, n0 + m + 2], axis=-1).reshape(-1, 4)


def element_stiffness(B, h):
    """Element matrix for ``int B grad U . grad W`` on a square of side ``h``,
    unknowns ordered ``(node, component)``."""
    ncomp = B.shape[0] // 2
    dphi = _shape_gradients() / h
    w = 0.25 * h * h
    Ke = np.zeros((4, ncomp, 4, ncomp))
    for q in range(4):
        for alpha in range(ncomp):
            for beta in range(ncomp):
                Bab = B[2 * alpha:2 * alpha + 2, 2 * beta:2 * beta + 2]
                Ke[:, alpha, :, beta] += w * dphi[q] @ Bab @ dphi[q].T
    return Ke.reshape(4 * ncomp, 4 * ncomp)


def _assemble(prob: MacroProblem):
    m = prob.m
    B = prob.B
    ncomp = B.shape[0] // 2
    h = 1.0 / m
    nn = (m + 1) ** 2
    Ke = element_stiffness(B, h)
    en = _element_nodes(m)
    dofs = (en[:, :, None] * ncomp + np.arange(ncomp)[None, None, :]).reshape(len(en), -1)
    rows = np.repeat(dofs, dofs.shape[1], axis=1).ravel()
    cols = np.tile(dofs, (1, dofs.shape[1])).ravel()
    vals = np.tile(Ke.ravel(), len(en))
    K = sp.csr_matrix((vals, (rows, cols)), shape=(nn * ncomp, nn * ncomp))
    b = np.zeros(nn * ncomp)

    # -int B F0 . grad W
    dphi = _shape_gradients() / h
    BF0 = B @ prob.F0
    fe = np.zeros((4, ncomp))
    for q in range(4):
        for alpha in range(ncomp):
            fe[:, alpha] -= 0.25 * h * h * dphi[q] @ BF0[2 * alpha:2 * alpha + 2]
    np.add.at(b, dofs.ravel(), np.tile(fe.ravel(), len(en)))

    if prob.source is not None:
        X, Y = _gauss_points(m)
        S = np.asarray(prob.source(X, Y))  # (ncomp, m, m, 4)
        phi = _shape_values()  # (q, a)
        loc = 0.25 * h * h * np.einsum("cijq,qa->ijac", S, phi).reshape(m * m, 4 * ncomp)
        np.add.at(b, dofs.ravel(), loc.ravel())

    if prob.neumann_flux is not None:
        _add_neumann(b, prob, m, ncomp)
    return K, b, ncomp


def _add_neumann(b, prob, m, ncomp):
    """Subtract ``int_boundary g W`` for the pressure component."""
    h = 1.0 / m
    s = np.arange(m)
    edges = [  # (node a, node b, x(t), y(t), outward normal)
        (s, s + 1, lambda t: (s + t) * h, lambda t: 0.0 * s, (0.0, -1.0)),
        (m * (m + 1) + s, m * (m + 1) + s + 1, lambda t: (s + t) * h, lambda t: 1.0 + 0.0 * s, (0.0, 1.0)),
        (s * (m + 1), (s + 1) * (m + 1), lambda t: 0.0 * s, lambda t: (s + t) * h, (-1.0, 0.0)),
        (s * (m + 1) + m, (s + 1) * (m + 1) + m, lambda t: 1.0 + 0.0 * s, lambda t: (s + t) * h, (1.0, 0.0)),
    ]
    for na, nb, fx, fy, nrm in edges:
        for t in _GAUSS:
            g = np.asarray(prob.neumann_flux(fx(t), fy(t), *nrm), dtype=float)
            np.add.at(b, na * ncomp, -0.5 * h * g * (1 - t))
            np.add.at(b, nb * ncomp, -0.5 * h * g * t)


def _trapezoid_weights(m):
    w1 = np.full(m + 1, 1.0 / m)
    w1[[0, -1]] *= 0.5
    return np.outer(w1, w1).ravel()


def solve_macro(prob: MacroProblem, tol=DEFAULT_TOL) -> MacroSolution:
    """Assemble and solve the homogenised system; fluxes are attached."""
    chk = check_onsager(prob.tensor)
    if not chk["pass"]:
        raise NonSpdTensor(f"tensor fails the symmetry/definiteness check: {chk}")
    m = prob.m
    K, b, ncomp = _assemble(prob)
    nn = (m + 1) ** 2
    wts = _trapezoid_weights(m)

    boundary = np.zeros((m + 1, m + 1), dtype=bool)
    boundary[[0, -1], :] = True
    boundary[:, [0, -1]] = True
    fixed = [0]  # pressure gauge node
    if prob.dirichlet:
        bnodes = np.flatnonzero(boundary.ravel())
        for c in range(1, ncomp):
            fixed.extend((bnodes * ncomp + c).tolist())
    else:
        fixed.extend(range(1, ncomp))  # one gauge node per potential
    fixed = np.array(sorted(set(fixed)))
    free = np.setdiff1d(np.arange(nn * ncomp), fixed)

    # pure-Neumann components must have a compatible load
    gauged = [0] if prob.dirichlet else list(range(ncomp))
    for c in gauged:
        comp = b[c::ncomp]
        b[c::ncomp] = comp - comp.mean()

    U = np.zeros(nn * ncomp)
    bnorm = float(np.linalg.norm(b))
    if bnorm > 0:
        Kff = K[free][:, free].tocsc()
        U[free] = spla.splu(Kff).solve(b[free])
    for c in gauged:
        comp = U[c::ncomp]
        U[c::ncomp] = comp - fsum_dot(comp, wts)

    r = (K @ U - b)[free]
    res = float(np.linalg.norm(r)) / bnorm if bnorm > 0 else 0.0
    report = SolveReport(1, res, "sparse-lu", res <= tol)
    if not report.converged:
        raise NoConvergence(f"macro residual {res:.3e} above tolerance", report)
    Ug = U.reshape(m + 1, m + 1, ncomp)
    z = prob.tensor.z
    sol = MacroSolution(m, Ug[:, :, 0].copy(), [-Ug[:, :, 1 + j] / z[j] for j in range(len(z))],
                        Ug[:, :, 1:].copy(), report)
    sol._K, sol._b, sol._U, sol._free = K, b, U, free
    macro_fluxes(sol, prob)
    return sol


def _cell_gradients(sol: MacroSolution):
    """Gradient of every component at element centres: ``(ncomp, 2, m, m)``."""
    m, h = sol.m, sol.h
    U = np.concatenate([sol.p0[..., None], sol.mu_tilde], axis=-1)
    gx = 0.5 * ((U[:-1, 1:] - U[:-1, :-1]) + (U[1:, 1:] - U[1:, :-1])) / h
    gy = 0.5 * ((U[1:, :-1] - U[:-1, :-1]) + (U[1:, 1:] - U[:-1, 1:])) / h
    return np.stack([gx, gy], axis=0).transpose(3, 0, 1, 2)


def macro_fluxes(sol: MacroSolution, prob: MacroProblem):
    """Fluxes ``-B F`` at element centres and the electrochemical potentials.

    Sets ``sol.u`` (shape ``(2, m, m)``), ``sol.jj`` (list of ``(2, m, m)``)
    and ``sol.mu`` (nodal ``-z_j (Phi_j + psi_ext)``, with ``psi_ext`` linear
    with gradient ``E`` and zero at the centre).
    """
    grads = _cell_gradients(sol)
    ncomp = grads.shape[0]
    F = grads.reshape(2 * ncomp, sol.m, sol.m) + prob.F0[:, None, None]
    flux = -np.einsum("ab,bij->aij", prob.B, F)
    sol.u = flux[0:2]
    sol.jj = [flux[2 * (j + 1):2 * (j + 2)] for j in range(ncomp - 1)]
    X, Y = sol.nodes()
    psi_ext = prob.forcing.linear_potential(X, Y)
    sol.mu = [-zj * (sol.phi0[j] + psi_ext) for j, zj in enumerate(prob.tensor.z)]
    return sol.u, sol.jj, sol.mu


def potential_form_fluxes(sol: MacroSolution, prob: MacroProblem):
    """Same fluxes from the potential form
    ``u = -K(grad p + f) + sum_i J_i (grad Phi_i + E)``,
    ``j_j = -L_j(grad p + f) + sum_i D_ji (grad Phi_i + E)``."""
    t = prob.tensor
    grads = _cell_gradients(sol)
    f = np.asarray(prob.forcing.f_star)[:, None, None]
    E = np.asarray(prob.forcing.E)[:, None, None]
    gp = grads[0] + f
    gphi = [-grads[1 + i] / t.z[i] + E for i in range(t.N)]
    u = -np.einsum("ab,bij->aij", t.K, gp)
    for i in range(t.N):
        u = u + np.einsum("ab,bij->aij", t.J[i], gphi[i])
    jj = []
    for j in range(t.N):
        q = -np.einsum("ab,bij->aij", t.L[j], gp)
        for i in range(t.N):
            q = q + np.einsum("ab,bij->aij", t.D[j][i], gphi[i])
        jj.append(q)
    return u, jj


def nodal_divergence(sol: MacroSolution):
    """Discrete divergence of each flux at interior nodes: the weak-form
    residual divided by the dual-cell area ``h^2``; shape ``(ncomp, m-1, m-1)``."""
    m = sol.m
    ncomp = sol.mu_tilde.shape[-1] + 1
    r = (sol._K @ sol._U - sol._b).reshape(m + 1, m + 1, ncomp)
    return np.moveaxis(r[1:-1, 1:-1], -1, 0) / sol.h ** 2


def energy_balance(sol: MacroSolution, prob: MacroProblem):
    """Dissipation ``int B F . F`` against the work of the forcing and sources.

    Testing the weak form with the solution itself gives
    ``int B F . F = int B F . F0 + int S U - int_boundary g p``.  Returns
    ``(dissipation, work, relative residual)``; both integrals use the
    element quadrature, which is exact for a constant tensor.
    """
    m, h = sol.m, sol.h
    ncomp = sol.mu_tilde.shape[-1] + 1
    U = sol._U.reshape(m + 1, m + 1, ncomp)
    en = _element_nodes(m)
    dphi = _shape_gradients() / h
    Uel = U.reshape(-1, ncomp)[en]  # (elements, 4, ncomp)
    B, F0 = prob.B, prob.F0
    diss, work = [], []
    for q in range(4):
        grad = np.einsum("an,eac->ecn", dphi[q], Uel).reshape(len(en), 2 * ncomp)
        F = grad + F0
        BF = F @ B.T
        diss.append(0.25 * h * h * fsum_dot(BF, F))
        work.append(0.25 * h * h * fsum_dot(BF, np.broadcast_to(F0, F.shape)))
    D = math.fsum(diss)
    # the remaining terms of the load vector, tested with U
    if prob.source is not None or prob.neumann_flux is not None:
        zero = MacroProblem(m, prob.tensor, Forcing(), prob.dirichlet, prob.source, prob.neumann_flux)
        _, b_src, _ = _assemble(zero)
        work.append(fsum_dot(b_src, sol._U))
    W = math.fsum(work)
    scale = max(abs(D), abs(W))
    return D, W, (abs(D - W) / scale if scale > 0 else 0.0)


def write_flux_csv(path, sol: MacroSolution, config_hash=None):
    """Line integrals of each flux across the mid-planes ``x = 1/2`` and ``y = 1/2``."""
    m, h = sol.m, sol.h
    rows = []
    fields = [("u", sol.u)] + [(f"j{j + 1}", q) for j, q in enumerate(sol.jj)]
    for name, q in fields:
        if m % 2 == 0:
            qx = 0.5 * (q[0][:, m // 2 - 1] + q[0][:, m // 2])
            qy = 0.5 * (q[1][m // 2 - 1, :] + q[1][m // 2, :])
        else:
            qx, qy = q[0][:, m // 2], q[1][m // 2, :]
        rows.append((name, math.fsum((qx * h).tolist()), math.fsum((qy * h).tolist())))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["flux", "through_x_mid", "through_y_mid", "config_hash"])
        for name, a, b in rows:
            w.writerow([name, repr(a), repr(b), config_hash or ""])
    return rows


def l2_error(sol: MacroSolution, exact_p, exact_phi):
    """Trapezoid-weighted nodal L2 error of ``(p, Phi_1, ..., Phi_N)``."""
    X, Y = sol.nodes()
    w = _trapezoid_weights(sol.m).reshape(sol.m + 1, sol.m + 1)
    err = w * (sol.p0 - exact_p(X, Y)) ** 2
    for j, phi in enumerate(sol.phi0):
        err = err + w * (phi - exact_phi[j](X, Y)) ** 2
    return math.sqrt(math.fsum(err.ravel().tolist()))


def manufactured_problem(tensor: OnsagerTensor, m, forcing: Forcing | None = None):
    """Problem with a known smooth solution for convergence checks.

    ``p = cos(pi x) cos(pi y)`` (zero mean) and
    ``Phi_j = (1 + j) sin(pi x) sin(pi y) / z_j``; the source and the pressure
    boundary flux are computed from the tensor.  Returns
    ``(problem, exact_p, exact_phi)``.
    """
    forcing = forcing or Forcing()
    z = tensor.z
    N = len(z)
    B = tensor.B
    pi = math.pi
    # U_0 = p, U_c = mu_c = -z_c Phi_c = -c sin sin
    amp = [1.0] + [-float(c) for c in range(1, N + 1)]

    def hess(c, x, y):
        if c == 0:
            v, cross = np.cos(pi * x) * np.cos(pi * y), np.sin(pi * x) * np.sin(pi * y)
        else:
            v, cross = np.sin(pi * x) * np.sin(pi * y), np.cos(pi * x) * np.cos(pi * y)
        a = amp[c] * pi * pi
        return (-a * v, a * cross, -a * v)  # xx, xy, yy

    def grad(c, x, y):
        a = amp[c] * pi
        if c == 0:
            return (-a * np.sin(pi * x) * np.cos(pi * y), -a * np.cos(pi * x) * np.sin(pi * y))
        return (a * np.cos(pi * x) * np.sin(pi * y), a * np.sin(pi * x) * np.cos(pi * y))

    def source(x, y):
        out = np.zeros((N + 1,) + np.shape(x))
        for b in range(N + 1):
            hxx, hxy, hyy = hess(b, x, y)
            H = ((hxx, hxy), (hxy, hyy))
            for a in range(N + 1):
                for k in range(2):
                    for l in range(2):
                        out[a] -= B[2 * a + k, 2 * b + l] * H[k][l]
        return out

    F0 = MacroProblem(m, tensor, forcing).F0

    def neumann_flux(x, y, nx, ny):
        F = [g + np.zeros(np.shape(x)) for b in range(N + 1) for g in grad(b, x, y)]
        q = [-sum(B[k, c] * (F[c] + F0[c]) for c in range(2 * (N + 1))) for k in range(2)]
        return q[0] * nx + q[1] * ny

    prob = MacroProblem(m, tensor, forcing, True, source, neumann_flux)
    exact_p = lambda x, y: np.cos(pi * x) * np.cos(pi * y)
    exact_phi = [(lambda x, y, c=c: c * np.sin(pi * x) * np.sin(pi * y) / z[c - 1]) for c in range(1, N + 1)]
    return prob, exact_p, exact_phi
