"""Random disperse microstructures on a periodic cell, their validation and
voxelisation onto a staggered grid."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import DisconnectedFluid, InfeasibleConstraints, ResolutionTooCoarse
from .grid import MacGrid

GENERATORS = ("perturbed-lattice", "bernoulli", "poisson-voronoi")

# substream keys reserved for global draws (site streams use 0, 1, 2, ...)
_SHIFT_STREAM = 0xFFFF_FFF0
_COUNT_STREAM = 0xFFFF_FFF1
_GAP_TOL = 1e-12


def rng_stream(seed: int, key: int) -> np.random.Generator:
    """Philox generator for substream ``key`` of ``seed``.

    Each lattice site or Poisson point draws from its own substream, so the
    realisation does not depend on the order in which sites are visited.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(key),))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class DisperseParams:
    delta_min: float = 0.05
    r_min: float = 0.05
    r_max: float = 1.0
    r_0: float = 1.0
    strict_r5: bool = False
    gap_fraction: float = 0.05

    def __post_init__(self):
        if not (self.delta_min > 0):
            raise ValueError("delta_min must be positive")
        if not (0 < self.r_min <= self.r_max):
            raise ValueError("need 0 < r_min <= r_max")
        if not (self.r_0 > 0):
            raise ValueError("r_0 must be positive")
        if not (0 <= self.gap_fraction < 1):
            raise ValueError("gap_fraction must lie in [0, 1)")


@dataclass
class Microstructure:
    L: float
    centers: np.ndarray
    radii: np.ndarray
    generator: str
    seed: int
    constraints: DisperseParams = field(default_factory=DisperseParams)

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=float).reshape(-1, 2)
        self.radii = np.asarray(self.radii, dtype=float).ravel()
        if self.centers.shape[0] != self.radii.size:
            raise ValueError("centers and radii differ in length")

    @property
    def n_grains(self):
        return self.radii.size

    @property
    def grains(self):
        return [(tuple(c), float(r)) for c, r in zip(self.centers, self.radii)]

    def solid_fraction(self):
        """Exact area fraction of the (disjoint) disks."""
        return math.fsum(math.pi * r * r for r in self.radii) / self.L ** 2


def _wrap(points, L):
    return np.mod(points, L)


def _periodic_tree(centers, L):
    # cKDTree requires data strictly inside [0, L)
    pts = _wrap(centers, L)
    pts[pts >= L] = 0.0
    return cKDTree(pts, boxsize=L)


def _clamp_radii(centers, radii, L, delta):
    """Shrink radii proportionally so every pair keeps a surface gap >= delta."""
    radii = np.minimum(radii, (L - delta) / 2)
    if radii.size < 2:
        return radii
    tree = _periodic_tree(centers, L)
    reach = 2 * radii.max() + delta
    pairs = tree.query_pairs(reach, output_type="ndarray")
    if pairs.size == 0:
        return radii
    a, b = pairs[:, 0], pairs[:, 1]
    d = _periodic_distance(centers[a], centers[b], L)
    factor = np.minimum(1.0, (d - delta) / (radii[a] + radii[b]))
    scale = np.ones_like(radii)
    np.minimum.at(scale, a, factor)
    np.minimum.at(scale, b, factor)
    return radii * scale


def _periodic_distance(p, q, L):
    d = np.abs(np.asarray(p) - np.asarray(q))
    d = np.minimum(d, L - d)
    return np.hypot(d[..., 0], d[..., 1])


def _lattice_sites(L):
    n = int(round(L))
    if n < 1 or abs(n - L) > 1e-12:
        raise ValueError(f"L={L} must be a positive integer multiple of the lattice pitch")
    j, i = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    return np.stack([i.ravel(), j.ravel()], axis=1).astype(float), n


def generate_perturbed_lattice(L, amplitude=0.25, radius_range=(1 / 3, 2 / 3), seed=0,
                               constraints=None) -> Microstructure:
    """Disks at ``j + zeta_j + eta`` with independent uniform offsets and radii.

    ``radius_range`` is ``(lo, hi)`` or a single value.  Overlapping or
    too-close disks are shrunk proportionally until the minimal gap holds.
    """
    c = constraints or DisperseParams()
    sites, _ = _lattice_sites(L)
    lo, hi = (radius_range, radius_range) if np.isscalar(radius_range) else radius_range
    if len(set(np.atleast_1d(radius_range).tolist())) == 1:
        lo = hi = float(np.atleast_1d(radius_range)[0])
    offsets = np.empty_like(sites)
    radii = np.empty(len(sites))
    for s in range(len(sites)):
        g = rng_stream(seed, s)
        offsets[s] = g.uniform(-amplitude, amplitude, size=2) if amplitude > 0 else 0.0
        radii[s] = g.uniform(lo, hi) if hi > lo else lo
    eta = rng_stream(seed, _SHIFT_STREAM).uniform(0.0, 1.0, size=2)
    centers = _wrap(sites + offsets + eta, L)
    radii = np.minimum(_clamp_radii(centers, radii, L, c.delta_min), c.r_max)
    if np.any(radii < c.r_min):
        raise InfeasibleConstraints(
            f"gap enforcement shrank a radius to {radii.min():.4g} < r_min={c.r_min}")
    return Microstructure(L, centers, radii, "perturbed-lattice", int(seed), c)


def generate_bernoulli(L, p_open=0.5, seed=0, constraints=None) -> Microstructure:
    """Lattice disks of radius 1/2 (probability ``p_open``) or 1/4, shrunk by
    ``1 - gap_fraction`` so neighbours never touch."""
    if not 0.0 <= p_open <= 1.0:
        raise ValueError("p_open must lie in [0, 1]")
    c = constraints or DisperseParams()
    sites, _ = _lattice_sites(L)
    shrink = 1.0 - c.gap_fraction
    radii = np.empty(len(sites))
    for s in range(len(sites)):
        big = rng_stream(seed, s).random() < p_open
        radii[s] = (0.5 if big else 0.25) * shrink
    eta = rng_stream(seed, _SHIFT_STREAM).uniform(0.0, 1.0, size=2)
    return Microstructure(L, _wrap(sites + eta, L), radii, "bernoulli", int(seed), c)


def generate_poisson_voronoi(L, intensity=1.0, r=0.3, seed=0, constraints=None) -> Microstructure:
    """Disks of radius ``r`` at Poisson points, kept when they fit well inside
    their Voronoi cell.

    A disk is kept iff ``r <= nn/2 - delta_min/2`` with ``nn`` the periodic
    nearest-neighbour distance, so kept disks also respect the minimal gap.
    With ``strict_r5`` empty regions are filled from a square lattice of
    spacing at most ``r_0/2``.
    """
    if not (intensity > 0 and r > 0):
        raise ValueError("intensity and r must be positive")
    c = constraints or DisperseParams()
    count = int(rng_stream(seed, _COUNT_STREAM).poisson(intensity * L * L))
    pts = np.array([rng_stream(seed, k).uniform(0.0, L, size=2) for k in range(count)]).reshape(-1, 2)
    keep = np.zeros(count, dtype=bool)
    if count >= 2:
        nn, _ = _periodic_tree(pts, L).query(pts, k=2)
        keep = r <= 0.5 * nn[:, 1] - 0.5 * c.delta_min
    elif count == 1:
        keep[:] = 2 * r + c.delta_min <= L
    centers = pts[keep]
    radii = np.full(centers.shape[0], float(r))
    if c.strict_r5:
        centers, radii = _fill_empty(centers, radii, L, r, c)
    return Microstructure(L, centers, radii, "poisson-voronoi", int(seed), c)


def _fill_empty(centers, radii, L, r, c):
    m = math.ceil(L / (c.r_0 / 2))
    a = L / m
    r_fill = min(r, a / 2 - c.delta_min)
    if r_fill < c.r_min:
        raise InfeasibleConstraints(f"fill radius {r_fill:.4g} below r_min={c.r_min}")
    centers, radii = list(map(tuple, centers)), list(radii)
    for j in range(m):
        for i in range(m):
            q = np.array([(i + 0.5) * a, (j + 0.5) * a])
            if centers:
                d = _periodic_distance(np.array(centers), q, L) - np.array(radii)
                if d.min() - r_fill < c.delta_min:
                    continue
            centers.append(tuple(q))
            radii.append(r_fill)
    return np.array(centers).reshape(-1, 2), np.array(radii)


def check_disperse(micro: Microstructure, constraints=None, r5_spacing=None):
    """List violations of the disperse-medium conditions as ``(rule, where)``.

    R2: radius below ``r_min``; R3: surface gap below ``delta_min`` (pairs,
    including a disk with its own periodic image); R4: radius above
    ``r_max``; R5 (strict mode only): sample points farther than ``r_0``
    from every grain.
    """
    c = constraints or micro.constraints
    L, X, R = micro.L, micro.centers, micro.radii
    report = []
    for g in np.flatnonzero(R < c.r_min - _GAP_TOL):
        report.append(("R2", int(g)))
    for g in np.flatnonzero(R > c.r_max + _GAP_TOL):
        report.append(("R4", int(g)))
    for g in np.flatnonzero(L - 2 * R < c.delta_min - _GAP_TOL):
        report.append(("R3", (int(g), int(g))))
    if R.size >= 2:
        pairs = _periodic_tree(X, L).query_pairs(2 * R.max() + c.delta_min, output_type="ndarray")
        if pairs.size:
            a, b = pairs[:, 0], pairs[:, 1]
            gap = _periodic_distance(X[a], X[b], L) - R[a] - R[b]
            for k in np.flatnonzero(gap < c.delta_min - _GAP_TOL):
                report.append(("R3", (int(a[k]), int(b[k]))))
    if c.strict_r5:
        for loc in _r5_violations(micro, c, r5_spacing):
            report.append(("R5", loc))
    return report


def _r5_violations(micro, c, spacing=None):
    L = micro.L
    spacing = spacing or c.r_0 / 8
    m = max(2, math.ceil(L / spacing))
    s = (np.arange(m) + 0.5) * (L / m)
    P = np.stack(np.meshgrid(s, s, indexing="xy"), axis=-1).reshape(-1, 2)
    if micro.n_grains == 0:
        return [tuple(p) for p in P]
    dist = _distance_to_grains(P, micro)
    return [tuple(P[k]) for k in np.flatnonzero(dist > c.r_0)]


def _distance_to_grains(P, micro):
    """Periodic distance from each point to the nearest grain (0 inside)."""
    tree = _periodic_tree(micro.centers, micro.L)
    k = min(micro.n_grains, 32)
    d, idx = tree.query(P, k=k)
    d = d.reshape(len(P), k)
    idx = idx.reshape(len(P), k)
    return np.maximum(0.0, (d - micro.radii[idx]).min(axis=1))


class FluidGrid(MacGrid):
    """MAC grid of a voxelised microstructure with boundary quadrature.

    ``wall_faces`` are faces between a fluid cell and a solid cell (or, on a
    bounded grid, nothing: the outer box is handled by the caller).  Each
    carries the grain it belongs to, the adjacent fluid cell index and a
    quadrature weight; weights of one grain sum to its perimeter.
    """

    def __init__(self, cell_mask, h, L=None, grain_label=None, perimeters=None, periodic=True,
                 micro=None):
        super().__init__(cell_mask, h, periodic=periodic)
        self.L = float(L if L is not None else h * self.nx)
        self.micro = micro
        if grain_label is None:
            grain_label = np.where(self.cell_mask, -1, 0)
        self.grain_label = np.asarray(grain_label)
        wall = np.flatnonzero(self.face_wall)
        a, b = self.face_a[wall], self.face_b[wall]
        fluid_a = self.cell_mask.ravel()[a]
        fluid_cell = np.where(fluid_a, a, b)
        solid_cell = np.where(fluid_a, b, a)
        self.wall_faces = wall
        self.wall_cell = self.cell_index[fluid_cell]
        self.wall_grain = self.grain_label.ravel()[solid_cell]
        # outward normal of the fluid points into the solid neighbour
        self.wall_normal_sign = np.where(fluid_a, 1.0, -1.0)
        w = np.full(wall.size, self.h)
        if perimeters is not None:
            n_grains = len(perimeters)
            raw = np.bincount(self.wall_grain, minlength=n_grains)
            for g in range(n_grains):
                if raw[g] == 0:
                    raise ResolutionTooCoarse(f"grain {g} has no resolved boundary")
                sel = self.wall_grain == g
                w[sel] = perimeters[g] / raw[g]
        self.wall_weight = w

    def boundary_source(self, sigma_per_grain):
        """Per fluid cell: sum of ``sigma * weight`` over its wall faces."""
        sig = np.asarray(sigma_per_grain, dtype=float)
        vals = sig[self.wall_grain] * self.wall_weight if self.wall_faces.size else np.zeros(0)
        return np.bincount(self.wall_cell, weights=vals, minlength=self.n_fluid)

    def grain_boundary_faces(self, g):
        sel = self.wall_grain == g
        return list(zip(self.wall_faces[sel].tolist(), self.wall_weight[sel].tolist()))

    def fluid_components(self):
        f = self.open_faces
        a = self.cell_index[self.face_a[f]]
        b = self.cell_index[self.face_b[f]]
        adj = coo_matrix((np.ones(a.size), (a, b)), shape=(self.n_fluid, self.n_fluid))
        return connected_components(adj, directed=False)


def rasterize(micro: Microstructure, n: int):
    """Grain label per cell (``-1`` for fluid) by cell-centre sampling."""
    L = micro.L
    h = L / n
    label = np.full((n, n), -1, dtype=np.int64)
    for g, ((cx, cy), r) in enumerate(zip(micro.centers, micro.radii)):
        i0, i1 = math.floor((cx - r) / h - 0.5), math.ceil((cx + r) / h - 0.5)
        j0, j1 = math.floor((cy - r) / h - 0.5), math.ceil((cy + r) / h - 0.5)
        ii = np.arange(i0, i1 + 1)
        jj = np.arange(j0, j1 + 1)
        dx = (ii + 0.5) * h - cx
        dy = (jj + 0.5) * h - cy
        inside = dy[:, None] ** 2 + dx[None, :] ** 2 < r * r
        jw, iw = np.nonzero(inside)
        label[jj[jw] % n, ii[iw] % n] = g
    return label


def voxelize(micro: Microstructure, n: int, check_resolution=True) -> FluidGrid:
    """Voxelise ``micro`` on an ``n x n`` periodic grid.

    A cell is solid iff its centre lies in a grain.  Raises
    :class:`ResolutionTooCoarse` when ``h > delta_min/4`` (grains could
    merge) and :class:`DisconnectedFluid` when the fluid is not connected.
    """
    h = micro.L / n
    if check_resolution:
        if n < 32:
            raise ResolutionTooCoarse(f"n={n} is below the minimum of 32 cells")
        if h > micro.constraints.delta_min / 4 + 1e-15:
            raise ResolutionTooCoarse(
                f"h={h:.4g} exceeds delta_min/4={micro.constraints.delta_min / 4:.4g}")
    label = rasterize(micro, n)
    perimeters = 2 * np.pi * micro.radii
    fg = FluidGrid(label < 0, h, L=micro.L, grain_label=label,
                   perimeters=perimeters if micro.n_grains else None, micro=micro)
    _require_connected(fg)
    return fg


def _require_connected(fg):
    if fg.n_fluid == 0:
        raise DisconnectedFluid("no fluid cells")
    ncomp, _ = fg.fluid_components()
    if ncomp != 1:
        raise DisconnectedFluid(f"fluid splits into {ncomp} components")


# ---------------------------------------------------------------------------
# EKMICRO1 text format


def write_microstructure(path, micro: Microstructure, config_hash=None):
    head = f"EKMICRO1 L={float(micro.L)!r} generator={micro.generator} seed={int(micro.seed)}"
    if config_hash:
        head += f" config_hash={config_hash}"
    lines = [head] + [f"{cx!r} {cy!r} {r!r}" for (cx, cy), r in zip(micro.centers.tolist(), micro.radii.tolist())]
    Path(path).write_text("\n".join(lines) + "\n")


def read_microstructure(path, constraints=None):
    """Inverse of :func:`write_microstructure`; returns ``(micro, header)``."""
    lines = Path(path).read_text().splitlines()
    tokens = lines[0].split()
    if not tokens or tokens[0] != "EKMICRO1":
        raise ValueError(f"{path}: not an EKMICRO1 file")
    header = dict(t.split("=", 1) for t in tokens[1:])
    rows = np.array([[float(v) for v in ln.split()] for ln in lines[1:] if ln.strip()]).reshape(-1, 3)
    micro = Microstructure(float(header["L"]), rows[:, :2], rows[:, 2], header["generator"],
                           int(header["seed"]), constraints or DisperseParams())
    return micro, header
