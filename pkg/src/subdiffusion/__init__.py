"""Implicit L1-type solver for time-fractional diffusion with a posteriori certificates."""

from .elliptic import DiffusionField, SpatialMesh
from .fracderiv import TimeGrid, build_coefficients, discrete_caputo, mittag_leffler, psi
from .timestepper import ProblemSpec, Reconstruction, SchemeHistory, run

__version__ = "0.1.0"

__all__ = [
    "DiffusionField",
    "ProblemSpec",
    "Reconstruction",
    "SchemeHistory",
    "SpatialMesh",
    "TimeGrid",
    "build_coefficients",
    "discrete_caputo",
    "mittag_leffler",
    "psi",
    "run",
]
