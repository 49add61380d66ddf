"""Spectral 2D Navier-Stokes toolkit for quasi-potentials and large deviations."""

__version__ = "0.1.0"

from .action import ControlPath, NoiseSpec, action_S
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .nonlinear import DealiasRule, bilinear_B, trilinear_b
from .quasipotential import MamProblem, mam_minimize, quasipotential_U
from .skeleton import ForcingPath, Path, TimeGrid, solve_skeleton
from .spectral import SpectralField, WaveLattice, make_lattice

__all__ = [
    "ControlPath", "NoiseSpec", "action_S", "CheckpointError", "load_checkpoint", "save_checkpoint",
    "DealiasRule", "bilinear_B", "trilinear_b", "MamProblem", "mam_minimize", "quasipotential_U",
    "ForcingPath", "Path", "TimeGrid", "solve_skeleton", "SpectralField", "WaveLattice", "make_lattice",
]
