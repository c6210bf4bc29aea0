"""Dimensionless electrolyte parameters, the Boltzmann charge density and
a-priori bounds for the equilibrium potential."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import NonNeutral, NonPositive, ValenceOrder

NEUTRALITY_ATOL = 1e-12


@dataclass(frozen=True)
class ElectrolyteSpec:
    """Valences, bulk concentrations, Peclet numbers, screening ratio ``beta``
    and surface-charge scale ``N_sigma``."""

    z: tuple
    n_c: tuple
    Pe: tuple
    beta: float = 1.0
    N_sigma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "z", tuple(int(v) for v in self.z))
        object.__setattr__(self, "n_c", tuple(float(v) for v in self.n_c))
        object.__setattr__(self, "Pe", tuple(float(v) for v in self.Pe))
        object.__setattr__(self, "beta", float(self.beta))
        object.__setattr__(self, "N_sigma", float(self.N_sigma))

    @property
    def N(self) -> int:
        return len(self.z)

    def as_dict(self):
        return {"z": list(self.z), "n_c": list(self.n_c), "Pe": list(self.Pe),
                "beta": self.beta, "N_sigma": self.N_sigma}


@dataclass(frozen=True)
class SurfaceCharge:
    """Surface charge density on grain boundaries.

    ``kind="constant"`` uses ``value`` everywhere; ``kind="per-grain"`` reads
    ``table[g]`` for grain ``g``.  ``bound`` defaults to ``sup|sigma|``.
    """

    kind: str = "constant"
    value: float = 0.0
    table: tuple = ()
    bound: float | None = None

    def __post_init__(self):
        if self.kind not in ("constant", "per-grain"):
            raise ValueError(f"unknown surface charge kind {self.kind!r}")
        object.__setattr__(self, "table", tuple(float(v) for v in self.table))
        sup = self.sup
        if self.bound is None:
            object.__setattr__(self, "bound", sup)
        elif sup > self.bound * (1 + 1e-14):
            raise ValueError(f"|sigma| = {sup} exceeds the declared bound {self.bound}")

    @property
    def sup(self) -> float:
        if self.kind == "constant":
            return abs(float(self.value))
        return max((abs(v) for v in self.table), default=0.0)

    def for_grain(self, g: int) -> float:
        if self.kind == "constant":
            return float(self.value)
        return self.table[g]

    def per_grain(self, n_grains: int) -> np.ndarray:
        if self.kind == "constant":
            return np.full(n_grains, float(self.value))
        if len(self.table) < n_grains:
            raise ValueError(f"charge table has {len(self.table)} entries for {n_grains} grains")
        return np.asarray(self.table[:n_grains])


@dataclass(frozen=True)
class Forcing:
    """Constant macroscopic body force ``f_star`` and external field ``E``.

    If an external potential is supplied as a callable ``psi_ext(x, y)`` its
    gradient must match ``E``; :meth:`check_consistency` tests this.
    """

    f_star: tuple = (0.0, 0.0)
    E: tuple = (0.0, 0.0)
    psi_ext: object = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "f_star", tuple(float(v) for v in self.f_star))
        object.__setattr__(self, "E", tuple(float(v) for v in self.E))

    def check_consistency(self, h=1e-4, tol=1e-6, points=((0.3, 0.4), (0.7, 0.2))):
        if self.psi_ext is None:
            return True
        for x, y in points:
            gx = (self.psi_ext(x + h, y) - self.psi_ext(x - h, y)) / (2 * h)
            gy = (self.psi_ext(x, y + h) - self.psi_ext(x, y - h)) / (2 * h)
            if abs(gx - self.E[0]) > tol or abs(gy - self.E[1]) > tol:
                return False
        return True

    def linear_potential(self, x, y, center=(0.5, 0.5)):
        """Potential with gradient ``E``, zero at ``center``."""
        return self.E[0] * (np.asarray(x) - center[0]) + self.E[1] * (np.asarray(y) - center[1])

    @property
    def is_zero(self):
        return not any(self.f_star) and not any(self.E)


@dataclass(frozen=True)
class BoundConstants:
    V_m: float
    V_M: float
    C_m: float
    C_M: float
    psi_min: float
    psi_max: float

    @property
    def cutoff_level(self) -> float:
        """Cut-off level for the Boltzmann nonlinearity, with a factor 2 of slack."""
        return 2.0 * (abs(self.psi_min) + abs(self.psi_max) + 1.0)

    def as_dict(self):
        return {k: float(getattr(self, k)) for k in ("V_m", "V_M", "C_m", "C_M", "psi_min", "psi_max")}


def validate_electrolyte(spec: ElectrolyteSpec) -> ElectrolyteSpec:
    """Return ``spec`` unchanged if it is admissible, otherwise raise."""
    z, n_c, Pe = spec.z, spec.n_c, spec.Pe
    if not (len(z) == len(n_c) == len(Pe)) or len(z) < 1:
        raise ValueError("z, n_c and Pe must have the same positive length")
    if any(v == 0 for v in z):
        raise ValenceOrder("valences must be nonzero")
    if any(b <= a for a, b in zip(z, z[1:])) or not (z[0] < 0 < z[-1]):
        raise ValenceOrder(f"valences {z} must increase strictly and span zero")
    bad = [name for name, vals in (("n_c", n_c), ("Pe", Pe)) if any(not (v > 0) for v in vals)]
    if not (spec.beta > 0):
        bad.append("beta")
    if spec.N_sigma < 0:
        bad.append("N_sigma")
    if bad:
        raise NonPositive(f"nonpositive parameters: {', '.join(bad)}")
    charge = math.fsum(zj * nj for zj, nj in zip(z, n_c))
    if abs(charge) > NEUTRALITY_ATOL:
        raise NonNeutral(f"bulk charge sum(z n_c) = {charge:.3e} is not zero")
    return spec


def hardy_nonlinearity(spec: ElectrolyteSpec, psi):
    """Charge-density function ``-sum_j z_j n_j^c exp(-z_j psi)``.

    Accepts a scalar or an array; increasing in ``psi``.
    """
    psi = np.asarray(psi, dtype=float)
    out = np.zeros_like(psi)
    for zj, nj in zip(spec.z, spec.n_c):
        out = out - zj * nj * np.exp(-zj * psi)
    return out if out.ndim else float(out)


def hardy_derivative(spec: ElectrolyteSpec, psi):
    psi = np.asarray(psi, dtype=float)
    out = np.zeros_like(psi)
    for zj, nj in zip(spec.z, spec.n_c):
        out = out + zj * zj * nj * np.exp(-zj * psi)
    return out if out.ndim else float(out)


def bound_constants(spec: ElectrolyteSpec, V_m: float, V_M: float) -> BoundConstants:
    """L-infinity bounds on the equilibrium potential from the extrema of the
    screened lift.

    The lower bound comes from comparing with ``V - C_m`` where ``C_m`` makes
    the most negative species dominate the charge density; the upper bound
    mirrors it with the roles of the extreme valences exchanged.  ``V`` is
    measured in units where the screened lift solves ``-lap V + V = source``
    while the potential solves ``-lap psi = -beta n_H(psi) + source``, hence
    the division by ``beta``.
    """
    if V_m > V_M:
        raise ValueError("V_m must not exceed V_M")
    z, n_c, beta = spec.z, spec.n_c, spec.beta
    z1, zN = z[0], z[-1]
    neg = math.fsum(n for zj, n in zip(z, n_c) if zj < 0)
    pos = math.fsum(n for zj, n in zip(z, n_c) if zj > 0)
    a_low = V_m / beta + z1 * neg
    a_up = V_M / beta + zN * pos
    C_m = V_M + math.log(max(0.0, -a_low) / (zN * n_c[-1]) + 1.0) / zN
    C_M = -V_m + math.log(max(0.0, a_up) / (abs(z1) * n_c[0]) + 1.0) / abs(z1)
    return BoundConstants(V_m=V_m, V_M=V_M, C_m=C_m, C_M=C_M, psi_min=V_m - C_m, psi_max=V_M + C_M)


def barrier_constant(C0: float, r_min: float, r_max: float, delta_min: float, samples: int = 4001) -> float:
    """Constant of the boundary-layer barrier ``h(d) = C0 d (1 - d/k)^3``.

    ``d`` is the distance to the nearest grain and ``k = min(r_min,
    delta_min/2)`` keeps the barrier supports of different grains apart.
    Returns ``max(sup h, sup |lap h(d)|)`` where for a disk of radius ``r``
    ``lap h(d) = h''(d) + h'(d)/(d + r)``; both radius extremes are scanned.
    """
    if C0 == 0.0:
        return 0.0
    k = min(r_min, delta_min / 2)
    t = np.linspace(0.0, k, samples)
    s = 1 - t / k
    h = C0 * t * s ** 3
    dh = C0 * (s ** 3 - 3 * t / k * s ** 2)
    d2h = C0 * (-6 / k * s ** 2 + 6 * t / k ** 2 * s)
    lap = max(np.abs(d2h + dh / (t + r)).max() for r in (r_min, r_max))
    return float(max(h.max(), lap))
