"""Electrokinetic homogenization in random porous media.

Pipeline: random disperse microstructure -> Poisson-Boltzmann equilibrium
-> cell (corrector) problems -> effective Onsager tensor -> macroscopic
solve, plus a direct solver on the perforated domain to check the
two-scale limit.
"""
from .config import RunConfig, parse_config
from .model import BoundConstants, ElectrolyteSpec, Forcing, SurfaceCharge, bound_constants
from .onsager import OnsagerTensor, check_onsager

__version__ = "0.1.0"

__all__ = [
    "BoundConstants", "ElectrolyteSpec", "Forcing", "OnsagerTensor", "RunConfig", "SurfaceCharge",
    "bound_constants", "check_onsager", "parse_config",
]
