"""Effective transport tensor from cell solutions, its structural checks and
ensemble statistics."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cell import face_concentration
from .errors import ConfigMismatch, MissingCellSolution

SYMMETRY_TOL = 1e-6


@dataclass
class OnsagerTensor:
    """Blocks of the effective tensor, indexed ``[l, k]`` (flux component
    ``l``, driving direction ``k``).

    ``J[i]``: velocity response to species ``i``; ``L[j]``: flux of species
    ``j`` under a pressure drop; ``D[j][i]``: flux of ``j`` under a drop of
    species ``i``.
    """

    z: tuple
    K: np.ndarray
    J: list
    L: list
    D: list
    porosity: float
    provenance: dict = field(default_factory=dict)
    d: int = 2

    @property
    def N(self):
        return len(self.z)

    @classmethod
    def from_block(cls, B, z, porosity=1.0, provenance=None, d=2):
        """Inverse of :attr:`B`: split a block matrix back into named blocks."""
        B = np.asarray(B, dtype=float)
        N = len(z)
        blk = lambda a, b: B[d * a:d * (a + 1), d * b:d * (b + 1)].copy()
        return cls(tuple(z), blk(0, 0), [blk(0, i + 1) * z[i] for i in range(N)],
                   [blk(j + 1, 0) for j in range(N)],
                   [[blk(j + 1, i + 1) * z[i] for i in range(N)] for j in range(N)],
                   porosity, dict(provenance or {}), d)

    @property
    def B(self):
        """Block matrix ``[[K, J_i/z_i], [L_j, D_ji/z_i]]``."""
        N, d = self.N, self.d
        B = np.zeros(((N + 1) * d, (N + 1) * d))
        B[:d, :d] = self.K
        for i in range(N):
            B[:d, d * (i + 1):d * (i + 2)] = self.J[i] / self.z[i]
        for j in range(N):
            B[d * (j + 1):d * (j + 2), :d] = self.L[j]
            for i in range(N):
                B[d * (j + 1):d * (j + 2), d * (i + 1):d * (i + 2)] = self.D[j][i] / self.z[i]
        return B

    def entries(self):
        """Flat ``(name, value)`` list in a fixed order."""
        out = []

        def add(name, M):
            for l in range(self.d):
                for k in range(self.d):
                    out.append((f"{name}[{l + 1}{k + 1}]", float(M[l, k])))

        add("K", self.K)
        for i in range(self.N):
            add(f"J{i + 1}", self.J[i])
        for j in range(self.N):
            add(f"L{j + 1}", self.L[j])
        for j in range(self.N):
            for i in range(self.N):
                add(f"D{j + 1}{i + 1}", self.D[j][i])
        return out

    def to_json_dict(self, config_hash=None):
        chk = check_onsager(self)
        return {
            "config_hash": config_hash,
            "seed": self.provenance.get("seed"),
            "grid": self.provenance.get("grid"),
            "porosity": self.porosity,
            "z": list(self.z),
            "K": self.K.tolist(),
            "J": [m.tolist() for m in self.J],
            "L": [m.tolist() for m in self.L],
            "D": [[m.tolist() for m in row] for row in self.D],
            "B": self.B.tolist(),
            "asym": chk["asym"],
            "lambda_min": chk["lambda_min"],
        }


def write_tensor_json(path, tensor: OnsagerTensor, config_hash=None):
    Path(path).write_text(json.dumps(tensor.to_json_dict(config_hash), indent=2, sort_keys=True) + "\n")


def read_tensor_json(path) -> tuple:
    data = json.loads(Path(path).read_text())
    t = OnsagerTensor(tuple(data["z"]), np.array(data["K"]), [np.array(m) for m in data["J"]], [np.array(m) for m in data["L"]],
                      [[np.array(m) for m in row] for row in data["D"]], data["porosity"],
                      {"seed": data.get("seed"), "grid": data.get("grid")})
    return t, data


def _face_mean(grid, values, direction):
    """``(1/|cell|) sum_{open faces in direction} value * h^2``."""
    sel = grid.face_dir[grid.open_faces] == direction
    return math.fsum(np.asarray(values)[sel].tolist()) / (grid.nx * grid.ny)


def assemble_tensor(cells, eq, grid, spec, provenance=None) -> OnsagerTensor:
    """Volume averages of the cell solutions over the periodic cell.

    Averages are sums over open faces divided by the number of cells, so the
    porosity weight is included.  Concentrations are the same harmonic face
    values used by the solver, which keeps the discrete tensor exactly
    symmetric up to solver error.
    """
    N = spec.N
    for family in range(N + 1):
        for k in (1, 2):
            if (family, k) not in cells:
                raise MissingCellSolution(f"cell solution ({family}, {k}) missing")
    Nf = [face_concentration(grid, n) for n in eq.n0]
    d = grid.face_dir[grid.open_faces]
    K = np.zeros((2, 2))
    J = [np.zeros((2, 2)) for _ in range(N)]
    L = [np.zeros((2, 2)) for _ in range(N)]
    D = [[np.zeros((2, 2)) for _ in range(N)] for _ in range(N)]
    for k in (1, 2):
        ek = (d == k - 1).astype(float)
        s0 = cells[(0, k)]
        v0 = s0.v.open_values()
        for l in (0, 1):
            K[l, k - 1] = _face_mean(grid, v0, l)
        for j in range(N):
            flux = Nf[j] * (v0 + spec.z[j] / spec.Pe[j] * s0.theta_gradient(j))
            for l in (0, 1):
                L[j][l, k - 1] = _face_mean(grid, flux, l)
        for i in range(N):
            si = cells[(i + 1, k)]
            vi = si.v.open_values()
            for l in (0, 1):
                J[i][l, k - 1] = _face_mean(grid, vi, l)
            for j in range(N):
                drift = si.theta_gradient(j) + (ek if i == j else 0.0)
                flux = Nf[j] * (vi + spec.z[j] / spec.Pe[j] * drift)
                for l in (0, 1):
                    D[j][i][l, k - 1] = _face_mean(grid, flux, l)
    prov = {"grid": [grid.nx, grid.ny]}
    prov.update(provenance or {})
    return OnsagerTensor(tuple(spec.z), K, J, L, D, grid.porosity, prov)


# ---------------------------------------------------------------------------
# eigenvalues


def jacobi_eigenvalues(S, tol=1e-12, max_sweeps=100):
    """Eigenvalues of a small symmetric matrix by cyclic Jacobi rotations.

    Sweeps stop once the off-diagonal Frobenius norm falls below
    ``tol * ||S||_F``.
    """
    A = np.array(S, dtype=float, copy=True)
    n = A.shape[0]
    if n == 0:
        return np.zeros(0)
    scale = np.linalg.norm(A) or 1.0
    for _ in range(max_sweeps):
        off = math.sqrt(max(0.0, float(np.sum(A * A) - np.sum(np.diag(A) ** 2))))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= 1e-300 or abs(apq) < 1e-18 * (abs(A[p, p]) + abs(A[q, q])):
                    A[p, q] = A[q, p] = 0.0
                    continue
                tau = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, tau) / (abs(tau) + math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                R = np.eye(n)
                R[p, p] = R[q, q] = c
                R[p, q], R[q, p] = s, -s
                A = R.T @ A @ R
    return np.sort(np.diag(A))


def check_onsager(t) -> dict:
    """Relative asymmetry and smallest eigenvalue of the symmetric part."""
    B = t.B if isinstance(t, OnsagerTensor) else np.asarray(t, dtype=float)
    norm = np.linalg.norm(B)
    asym = float(np.linalg.norm(B - B.T) / norm) if norm > 0 else 0.0
    lam = float(jacobi_eigenvalues(0.5 * (B + B.T))[0]) if B.size else 0.0
    return {"asym": asym, "lambda_min": lam, "pass": bool(asym <= SYMMETRY_TOL and lam > 0)}


def block_reciprocity(t: OnsagerTensor) -> float:
    """Largest relative mismatch in ``L_i = (J_i/z_i)^T`` and
    ``D_ij/z_j = (D_ji/z_i)^T``."""
    scale = np.linalg.norm(t.B) or 1.0
    worst = 0.0
    for i in range(t.N):
        worst = max(worst, np.abs(t.L[i] - (t.J[i] / t.z[i]).T).max() / scale)
        for j in range(t.N):
            worst = max(worst, np.abs(t.D[i][j] / t.z[j] - (t.D[j][i] / t.z[i]).T).max() / scale)
    return float(worst)


# ---------------------------------------------------------------------------
# ensembles


@dataclass
class EnsembleEstimate:
    names: list
    mean: np.ndarray
    stderr: np.ndarray
    M: int
    porosity: float
    tensors: list

    def get(self, name):
        k = self.names.index(name)
        return float(self.mean[k]), float(self.stderr[k])

    def mean_tensor(self) -> OnsagerTensor:
        ref = self.tensors[0]
        vals = iter(self.mean.tolist())

        def take():
            return np.array([[next(vals) for _ in range(2)] for _ in range(2)])

        K = take()
        J = [take() for _ in range(ref.N)]
        L = [take() for _ in range(ref.N)]
        D = [[take() for _ in range(ref.N)] for _ in range(ref.N)]
        return OnsagerTensor(ref.z, K, J, L, D, self.porosity, {"ensemble": self.M})


def ensemble_average(tensors, config_hashes=None) -> EnsembleEstimate:
    """Per-entry mean and standard error ``std/sqrt(M)`` over realisations.

    Entries are reduced with correctly rounded sums, so the result does not
    depend on the order of ``tensors``.
    """
    tensors = list(tensors)
    M = len(tensors)
    if M < 2:
        raise ValueError("an ensemble needs at least two realisations")
    ref = tensors[0]
    for t in tensors[1:]:
        if t.z != ref.z or t.provenance.get("grid") != ref.provenance.get("grid"):
            raise ConfigMismatch("tensors come from different configurations")
    if config_hashes is not None and len(set(config_hashes)) > 1:
        raise ConfigMismatch("tensors carry different configuration hashes")
    names = [n for n, _ in ref.entries()]
    data = np.array([[v for _, v in t.entries()] for t in tensors])
    # shift by the column minimum (order independent) so identical inputs reduce exactly
    lo = data.min(axis=0)
    mean = np.array([b + math.fsum((np.array(col) - b).tolist()) / M for col, b in zip(data.T.tolist(), lo)])
    var = np.array([math.fsum(((np.array(col) - m) ** 2).tolist()) / (M - 1)
                    for col, m in zip(data.T.tolist(), mean)])
    stderr = np.sqrt(var / M)
    por = math.fsum(t.porosity for t in tensors) / M
    return EnsembleEstimate(names, mean, stderr, M, por, tensors)


def write_ensemble_csv(path, est: EnsembleEstimate, config_hash=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["entry", "mean", "stderr", "M", "config_hash"])
        for name, m, s in zip(est.names, est.mean, est.stderr):
            w.writerow([name, repr(float(m)), repr(float(s)), est.M, config_hash or ""])
        w.writerow(["porosity", repr(float(est.porosity)), "", est.M, config_hash or ""])
