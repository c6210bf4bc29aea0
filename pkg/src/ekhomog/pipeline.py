"""Stage runner: generate -> pb -> cells -> onsager -> macro -> epsilon.

Stages talk to each other only through files in the output directory, so
each one can be re-run on its own.  Every artifact carries the config hash
and an input written under a different hash is never reused.  Realisations
fan out over worker processes; reductions happen in realisation order.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import epsilon as eps_mod
from .cell import CellSolution, CellSystem, solve_all_cells
from .config import RunConfig, build_config
from .errors import ConfigMismatch, EkError, StageFailure
from .geometry import (generate_bernoulli, generate_perturbed_lattice, generate_poisson_voronoi,
                       read_microstructure, voxelize, write_microstructure)
from .grid import MacVectorField, read_field, write_field
from .macrosolve import MacroProblem, energy_balance, solve_macro, write_flux_csv
from .model import BoundConstants
from .onsager import (assemble_tensor, block_reciprocity, check_onsager, ensemble_average,
                      jacobi_eigenvalues, read_tensor_json, write_ensemble_csv, write_tensor_json)
from .pb import EquilibriumState, charge_balance, equilibrium_concentrations, solve_equilibrium

log = logging.getLogger(__name__)

STAGES = ("generate", "pb", "cells", "onsager", "macro", "epsilon")
PER_REALIZATION = ("generate", "pb", "cells", "onsager")


@dataclass
class RunManifest:
    config_hash: str
    stages: dict = field(default_factory=dict)
    files: list = field(default_factory=list)
    times: dict = field(default_factory=dict)

    def to_json(self):
        ordered = {s: self.stages[s] for s in STAGES if s in self.stages}
        return json.dumps({"config_hash": self.config_hash, "stages": ordered,
                           "files": sorted(set(self.files)), "times": self.times},
                          indent=2, sort_keys=False) + "\n"


def order_stages(stages):
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise ValueError(f"unknown stage(s): {', '.join(unknown)}")
    return [s for s in STAGES if s in set(stages)]


# ---------------------------------------------------------------------------
# file layout


class Layout:
    def __init__(self, out):
        self.out = Path(out)

    def micro(self, r):
        return self.out / f"micro_r{r:03d}.txt"

    def psi(self, r):
        return self.out / f"pb_r{r:03d}_psi.field"

    def pb_summary(self, r):
        return self.out / f"pb_r{r:03d}.json"

    def cell(self, r, family, k, what):
        return self.out / f"cell_r{r:03d}_f{family}_k{k}_{what}.field"

    def cells_summary(self, r):
        return self.out / f"cells_r{r:03d}.json"

    def tensor(self, r):
        return self.out / f"tensor_r{r:03d}.json"

    ensemble = property(lambda self: self.out / "ensemble.csv")
    macro_flux = property(lambda self: self.out / "macro_flux.csv")
    macro_summary = property(lambda self: self.out / "macro.json")
    macro_nodes = property(lambda self: self.out / "macro_nodes.csv")
    epsilon = property(lambda self: self.out / "epsilon_metrics.csv")
    manifest = property(lambda self: self.out / "manifest.json")
    report = property(lambda self: self.out / "report.csv")
    verify = property(lambda self: self.out / "verify.json")


def _dump_json(path, data):
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _json_hash(path):
    return json.loads(Path(path).read_text()).get("config_hash")


def _require_hash(path, expected, kind):
    if not Path(path).exists():
        return False
    if kind == "micro":
        first = Path(path).read_text().split("\n", 1)[0]
        found = dict(t.split("=", 1) for t in first.split()[1:] if "=" in t).get("config_hash")
    elif kind == "field":
        found = read_field(path)[0].get("config_hash")
    else:
        found = _json_hash(path)
    if found != expected:
        raise ConfigMismatch(f"{path} was written under config {found}, current is {expected}")
    return True


# ---------------------------------------------------------------------------
# per-realisation stages


def make_microstructure(cfg: RunConfig, seed):
    geo = cfg.geometry
    p, c, L = geo["params"], cfg.constraints, geo["L"]
    if geo["generator"] == "perturbed-lattice":
        return generate_perturbed_lattice(L, p["amplitude"], tuple(p["radius_range"]), seed, c)
    if geo["generator"] == "bernoulli":
        return generate_bernoulli(L, p["p_open"], seed, c)
    return generate_poisson_voronoi(L, p["intensity"], p["r"], seed, c)


def _cell_tol(cfg):
    return cfg.solver["tol"]


def _max_iter(cfg, default):
    """``solver.max_iter``; 0 keeps the solver's own default."""
    return cfg.solver["max_iter"] or default


class RealizationRunner:
    """Runs the per-realisation stages, reading inputs back from disk."""

    def __init__(self, cfg: RunConfig, out, r, seed):
        self.cfg, self.lay, self.r, self.seed = cfg, Layout(out), r, seed
        self.h = cfg.hash
        self.files = []
        self._micro = self._grid = self._eq = self._cells = None

    # loaders -------------------------------------------------------------
    def micro(self):
        if self._micro is None:
            path = self.lay.micro(self.r)
            if not _require_hash(path, self.h, "micro"):
                self.generate()
            else:
                self._micro, _ = read_microstructure(path, self.cfg.constraints)
        return self._micro

    def grid(self):
        if self._grid is None:
            self._grid = voxelize(self.micro(), self.cfg.grid["n"])
        return self._grid

    def eq(self):
        if self._eq is None:
            path = self.lay.psi(self.r)
            if not _require_hash(path, self.h, "field"):
                self.pb()
            else:
                grid = self.grid()
                _, (vals,) = read_field(path)
                psi = grid.scalar(vals.ravel()[grid.fluid_cells])
                summary = json.loads(self.lay.pb_summary(self.r).read_text())
                self._eq = EquilibriumState(psi, equilibrium_concentrations(psi, self.cfg.electrolyte),
                                            BoundConstants(**summary["bounds"]), summary["energy"], None,
                                            spec=self.cfg.electrolyte)
        return self._eq

    def cells(self):
        if self._cells is None:
            if not _require_hash(self.lay.cells_summary(self.r), self.h, "json"):
                self.run_cells()
            else:
                self._cells = load_cells(self.lay, self.r, self.grid(), self.cfg.electrolyte.N)
        return self._cells

    # stages --------------------------------------------------------------
    def generate(self):
        self._micro = make_microstructure(self.cfg, self.seed)
        write_microstructure(self.lay.micro(self.r), self._micro, self.h)
        self.files.append(self.lay.micro(self.r).name)

    def pb(self):
        grid, spec, sc = self.grid(), self.cfg.electrolyte, self.cfg.surface_charge
        eq = solve_equilibrium(grid, spec, sc, max_iter=_max_iter(self.cfg, 100))
        self._eq = eq
        write_field(self.lay.psi(self.r), eq.psi, L=grid.L, config_hash=self.h)
        vol, surf = charge_balance(eq, grid, spec, sc)
        summary = eq.summary()
        summary.update(config_hash=self.h, seed=self.seed, charge_volume=vol, charge_surface=surf,
                       porosity=grid.porosity)
        if not math.isfinite(summary["cutoff"]):
            summary["cutoff"] = None
        _dump_json(self.lay.pb_summary(self.r), summary)
        self.files += [self.lay.psi(self.r).name, self.lay.pb_summary(self.r).name]

    def run_cells(self):
        eq, grid, spec = self.eq(), self.grid(), self.cfg.electrolyte
        system = CellSystem(eq, grid, spec, _cell_tol(self.cfg))
        sols, _ = solve_all_cells(eq, grid, spec, _cell_tol(self.cfg), system)
        self._cells = sols
        worst = {"combined": 0.0, "energy": 0.0, "wall_leakage": 0.0}
        for (family, k), s in sorted(sols.items()):
            write_field(self.lay.cell(self.r, family, k, "v"), s.v, L=grid.L, config_hash=self.h)
            write_field(self.lay.cell(self.r, family, k, "pi"), s.pi, L=grid.L, config_hash=self.h)
            self.files += [self.lay.cell(self.r, family, k, "v").name, self.lay.cell(self.r, family, k, "pi").name]
            for j, th in enumerate(s.theta):
                path = self.lay.cell(self.r, family, k, f"theta{j + 1}")
                write_field(path, th, L=grid.L, config_hash=self.h)
                self.files.append(path.name)
            for key in worst:
                worst[key] = max(worst[key], float(s.residuals[key]))
        _dump_json(self.lay.cells_summary(self.r), {"config_hash": self.h, "seed": self.seed,
                                                    "worst_residuals": worst})
        self.files.append(self.lay.cells_summary(self.r).name)

    def onsager(self):
        t = assemble_tensor(self.cells(), self.eq(), self.grid(), self.cfg.electrolyte,
                            {"seed": self.seed})
        write_tensor_json(self.lay.tensor(self.r), t, self.h)
        self.files.append(self.lay.tensor(self.r).name)
        return t


def load_cells(lay, r, grid, N):
    sols = {}
    for family in range(N + 1):
        for k in (1, 2):
            _, (u, v) = read_field(lay.cell(r, family, k, "v"))
            if grid.periodic:
                u, v = u[:, :-1], v[:-1, :]
            vel = MacVectorField(grid, u, v)
            _, (pi,) = read_field(lay.cell(r, family, k, "pi"))
            theta = []
            for j in range(N):
                _, (th,) = read_field(lay.cell(r, family, k, f"theta{j + 1}"))
                theta.append(grid.scalar(th.ravel()[grid.fluid_cells]))
            sols[(family, k)] = CellSolution(family, k, vel, grid.scalar(pi.ravel()[grid.fluid_cells]), theta)
    return sols


def _realization_worker(raw, out, r, seed, stages):
    """Top-level so it can be pickled for the process pool."""
    cfg = build_config(raw)
    runner = RealizationRunner(cfg, out, r, seed)
    times = {}
    try:
        for stage in stages:
            t0 = time.perf_counter()
            {"generate": runner.generate, "pb": runner.pb, "cells": runner.run_cells,
             "onsager": runner.onsager}[stage]()
            times[stage] = time.perf_counter() - t0
    except EkError as exc:
        return {"r": r, "error": (stage, str(exc), getattr(getattr(exc, "report", None), "as_dict", lambda: None)())}
    return {"r": r, "files": runner.files, "times": times}


# ---------------------------------------------------------------------------
# whole-run stages


def _tensors(cfg, lay, seed_offset):
    out = []
    for r, seed in enumerate(cfg.seeds(seed_offset)):
        if not _require_hash(lay.tensor(r), cfg.hash, "json"):
            log.info("tensor for realisation %d missing, computing it", r)
            RealizationRunner(cfg, lay.out, r, seed).onsager()
        t, _ = read_tensor_json(lay.tensor(r))
        out.append(t)
    return out


def macro_stage(cfg: RunConfig, lay: Layout, seed_offset=0):
    tensors = _tensors(cfg, lay, seed_offset)
    files = []
    if len(tensors) >= 2:
        est = ensemble_average(tensors, [cfg.hash] * len(tensors))
        write_ensemble_csv(lay.ensemble, est, cfg.hash)
        files.append(lay.ensemble.name)
        tensor = est.mean_tensor()
    else:
        tensor = tensors[0]
    prob = MacroProblem(cfg.macro["m"], tensor, cfg.forcing)
    sol = solve_macro(prob, cfg.solver["tol"])
    write_flux_csv(lay.macro_flux, sol, cfg.hash)
    D, W, rel = energy_balance(sol, prob)
    _dump_json(lay.macro_summary, {"config_hash": cfg.hash, "dissipation": D, "work": W,
                                   "energy_residual": rel, "residual": sol.report.residual,
                                   "ensemble_size": len(tensors)})
    X, Y = sol.nodes()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y", "p0"] + [f"phi{j + 1}" for j in range(len(sol.phi0))] + ["config_hash"])
    for idx in range(X.size):
        row = [repr(float(X.flat[idx])), repr(float(Y.flat[idx])), repr(float(sol.p0.flat[idx]))]
        row += [repr(float(phi.flat[idx])) for phi in sol.phi0]
        w.writerow(row + [cfg.hash])
    lay.macro_nodes.write_text(buf.getvalue())
    files += [lay.macro_flux.name, lay.macro_summary.name, lay.macro_nodes.name]
    return files


def _epsilon_worker(raw, out, seed, eps, m):
    cfg = build_config(raw)
    runner = RealizationRunner(cfg, out, 0, seed)
    eq, grid, cells = runner.eq(), runner.grid(), runner.cells()
    tensor, _ = read_tensor_json(runner.lay.tensor(0))
    forcing = cfg.forcing
    prob = MacroProblem(cfg.macro["m"], tensor, forcing)
    macro = solve_macro(prob, cfg.solver["tol"])
    dom = eps_mod.build_perforated_domain(runner.micro(), eps, m)
    sol = eps_mod.solve_linearized(dom, eq, cfg.electrolyte, forcing, cfg.solver["tol"],
                                   max_iter=_max_iter(cfg, 200))
    rec = eps_mod.reconstruct(macro, cells, eq, dom, forcing)
    visc, spec_terms = eps_mod.homogenized_energy(macro, cells, eq, cfg.electrolyte, forcing)
    return eps_mod.convergence_metrics(sol, rec, dom, math.fsum([visc] + spec_terms))


def epsilon_stage(cfg: RunConfig, lay: Layout, seed_offset=0, jobs=1):
    pairs = list(zip(cfg.epsilon["eps_list"], cfg.epsilon["m_list"]))
    if not pairs:
        return []
    seed = cfg.seeds(seed_offset)[0]
    # the realisation-0 inputs must exist before workers read them
    runner = RealizationRunner(cfg, lay.out, 0, seed)
    runner.cells()
    if not lay.tensor(0).exists():
        runner.onsager()
    if jobs > 1 and len(pairs) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(pairs))) as ex:
            rows = list(ex.map(_epsilon_worker, *zip(*[(cfg.raw, str(lay.out), seed, e, m) for e, m in pairs])))
    else:
        rows = [_epsilon_worker(cfg.raw, str(lay.out), seed, e, m) for e, m in pairs]
    eps_mod.write_metrics_csv(lay.epsilon, rows, cfg.hash)
    return runner.files + [lay.epsilon.name]


# ---------------------------------------------------------------------------
# driver


def run_pipeline(cfg: RunConfig, stages=STAGES, out=None, jobs=1, seed_offset=0) -> RunManifest:
    """Run ``stages`` (any subset, executed in dependency order).

    Realisation ``r`` uses seed ``base_seed + seed_offset + r``.  Missing or
    stale upstream artifacts of a requested stage are recomputed.
    """
    stages = order_stages(stages)
    lay = Layout(out or cfg.output["dir"])
    lay.out.mkdir(parents=True, exist_ok=True)
    man = RunManifest(cfg.hash)
    per = [s for s in stages if s in PER_REALIZATION]
    seeds = cfg.seeds(seed_offset)
    if per:
        t0 = time.perf_counter()
        args = [(cfg.raw, str(lay.out), r, s, per) for r, s in enumerate(seeds)]
        if jobs > 1 and len(seeds) > 1:
            with ProcessPoolExecutor(max_workers=min(jobs, len(seeds))) as ex:
                results = list(ex.map(_realization_worker, *zip(*args)))
        else:
            results = [_realization_worker(*a) for a in args]
        for res in sorted(results, key=lambda d: d["r"]):
            if "error" in res:
                stage, msg, report = res["error"]
                man.stages[stage] = "failed"
                lay.manifest.write_text(man.to_json())
                raise StageFailure(stage, res["r"], msg, report)
            man.files += res["files"]
            for stage, t in res["times"].items():
                man.times[stage] = man.times.get(stage, 0.0) + t
        for stage in per:
            man.stages[stage] = "ok"
        log.info("per-realisation stages %s done in %.1fs", per, time.perf_counter() - t0)
    for stage, fn in (("macro", lambda: macro_stage(cfg, lay, seed_offset)),
                      ("epsilon", lambda: epsilon_stage(cfg, lay, seed_offset, jobs))):
        if stage not in stages:
            continue
        t0 = time.perf_counter()
        try:
            man.files += fn()
        except FileNotFoundError as exc:
            man.stages[stage] = "failed"
            lay.manifest.write_text(man.to_json())
            raise StageFailure(stage, 0, f"missing upstream artifact {exc.filename}; run the onsager stage first") from exc
        except EkError as exc:
            if isinstance(exc, ConfigMismatch):
                raise
            man.stages[stage] = "failed"
            lay.manifest.write_text(man.to_json())
            raise StageFailure(stage, 0, str(exc), getattr(exc, "report", None)) from exc
        man.stages[stage] = "ok"
        man.times[stage] = time.perf_counter() - t0
    lay.manifest.write_text(man.to_json())
    return man


# ---------------------------------------------------------------------------
# verification and reporting


SYM_TOL = 1e-6
ENERGY_TOL = 1e-8


def _check(name, value, ok, detail=""):
    return {"check": name, "value": value, "pass": bool(ok), "detail": detail}


def verify(cfg: RunConfig, stages=STAGES, out=None, seed_offset=0) -> dict:
    """Run the invariant suite on the artifacts of ``stages``.

    Failures are report entries, never exceptions.  Artifacts written under
    a different config hash make the hash check fail.
    """
    stages = order_stages(stages)
    lay = Layout(out or cfg.output["dir"])
    checks = []
    if not stages:
        return {"config_hash": cfg.hash, "checks": [], "pass": True}
    seeds = cfg.seeds(seed_offset)

    def guarded(name, fn):
        try:
            checks.extend(fn())
        except (EkError, OSError, KeyError, ValueError) as exc:
            checks.append(_check(name, None, False, f"{type(exc).__name__}: {exc}"))

    for r, seed in enumerate(seeds):
        if "generate" in stages:
            guarded(f"r{r}.generate", lambda r=r: [_check(
                f"r{r}.generate.hash", None, _require_hash(lay.micro(r), cfg.hash, "micro"))])
        if "pb" in stages:
            def pb_checks(r=r):
                _require_hash(lay.pb_summary(r), cfg.hash, "json")
                s = json.loads(lay.pb_summary(r).read_text())
                b = s["bounds"]
                margin = min(s["psi_min_observed"] - b["psi_min"], b["psi_max"] - s["psi_max_observed"])
                scale = max(abs(s["charge_surface"]), 1e-300)
                bal = abs(s["charge_volume"] - s["charge_surface"]) / scale if s["charge_surface"] else abs(s["charge_volume"])
                return [_check(f"r{r}.pb.bounds_margin", margin, margin >= 0),
                        _check(f"r{r}.pb.charge_balance", bal, bal <= 1e-6),
                        _check(f"r{r}.pb.newton_residual", s["residual"], s["residual"] <= 1e-8)]
            guarded(f"r{r}.pb", pb_checks)
        if "cells" in stages:
            def cell_checks(r=r):
                _require_hash(lay.cells_summary(r), cfg.hash, "json")
                w = json.loads(lay.cells_summary(r).read_text())["worst_residuals"]
                return [_check(f"r{r}.cells.residual", w["combined"], w["combined"] <= 10 * cfg.solver["tol"]),
                        _check(f"r{r}.cells.energy_identity", w["energy"], w["energy"] <= ENERGY_TOL)]
            guarded(f"r{r}.cells", cell_checks)
        if "onsager" in stages:
            def tensor_checks(r=r):
                _require_hash(lay.tensor(r), cfg.hash, "json")
                t, _ = read_tensor_json(lay.tensor(r))
                chk = check_onsager(t)
                lk = float(jacobi_eigenvalues(0.5 * (t.K + t.K.T))[0])
                rec = block_reciprocity(t)
                return [_check(f"r{r}.onsager.symmetry", chk["asym"], chk["asym"] <= SYM_TOL),
                        _check(f"r{r}.onsager.lambda_min", chk["lambda_min"], chk["lambda_min"] > 0),
                        _check(f"r{r}.onsager.lambda_min_K", lk, lk > 0),
                        _check(f"r{r}.onsager.reciprocity", rec, rec <= SYM_TOL)]
            guarded(f"r{r}.onsager", tensor_checks)
    if "macro" in stages:
        def macro_checks():
            _require_hash(lay.macro_summary, cfg.hash, "json")
            s = json.loads(lay.macro_summary.read_text())
            return [_check("macro.energy_identity", s["energy_residual"], s["energy_residual"] <= ENERGY_TOL),
                    _check("macro.residual", s["residual"], s["residual"] <= cfg.solver["tol"])]
        guarded("macro", macro_checks)
    if "epsilon" in stages and cfg.epsilon["eps_list"]:
        def eps_checks():
            with open(lay.epsilon) as fh:
                rows = list(csv.DictReader(fh))
            if any(row["config_hash"] != cfg.hash for row in rows):
                raise ConfigMismatch("epsilon metrics were written under another config")
            out = []
            for row in rows:
                e = float(row["energy_residual"])
                out.append(_check(f"epsilon[{row['eps']}].energy_identity", e, e <= ENERGY_TOL))
            ratios = [float(row["poincare_ratio"]) for row in rows]
            if len(ratios) > 1:
                spread = max(ratios) / min(ratios)
                out.append(_check("epsilon.poincare_spread", spread, spread <= 2.0))
            return out
        guarded("epsilon", eps_checks)
    report = {"config_hash": cfg.hash, "checks": checks, "pass": all(c["pass"] for c in checks)}
    return report


def write_verify(report, path):
    _dump_json(path, report)


def write_report(cfg: RunConfig, out=None, seed_offset=0):
    """Tidy CSV (``quantity, realization, entry, value``) of every numeric
    result found in the output directory; runtimes are left out so the file
    is reproducible byte for byte."""
    lay = Layout(out or cfg.output["dir"])
    rows = []
    for r, _ in enumerate(cfg.seeds(seed_offset)):
        if lay.tensor(r).exists():
            _require_hash(lay.tensor(r), cfg.hash, "json")
            t, data = read_tensor_json(lay.tensor(r))
            for name, v in t.entries():
                rows.append(("tensor", r, name, v))
            rows += [("tensor", r, "porosity", t.porosity), ("tensor", r, "asym", data["asym"]),
                     ("tensor", r, "lambda_min", data["lambda_min"])]
        if lay.pb_summary(r).exists():
            s = json.loads(lay.pb_summary(r).read_text())
            for key in ("energy", "psi_min_observed", "psi_max_observed", "charge_volume", "charge_surface"):
                rows.append(("pb", r, key, s[key]))
    if lay.ensemble.exists():
        with open(lay.ensemble) as fh:
            for row in csv.DictReader(fh):
                rows.append(("ensemble_mean", "", row["entry"], float(row["mean"])))
                if row["stderr"]:
                    rows.append(("ensemble_stderr", "", row["entry"], float(row["stderr"])))
    if lay.macro_summary.exists():
        s = json.loads(lay.macro_summary.read_text())
        for key in ("dissipation", "work", "energy_residual"):
            rows.append(("macro", "", key, s[key]))
    if lay.epsilon.exists():
        with open(lay.epsilon) as fh:
            for row in csv.DictReader(fh):
                for key, v in row.items():
                    if key in ("eps", "config_hash", "runtime"):
                        continue
                    rows.append(("epsilon", row["eps"], key, float(v) if v not in ("", "None") else ""))
    with open(lay.report, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["quantity", "realization", "entry", "value", "config_hash"])
        for q, r, name, v in rows:
            w.writerow([q, r, name, repr(v) if isinstance(v, float) else v, cfg.hash])
    return lay.report
