"""Stabilized space-time finite elements for parabolic optimal control problems."""
from .assembly import (
    BlockSystem,
    ProblemCoefficients,
    StabilizationConfig,
    StabilizationMode,
    assemble_system,
    default_theta,
)
from .driver import RunConfig, run_adaptive, run_convergence_study
from .estimate import cost_functional, doerfler_mark, norm_h, norm_h_star, residual_indicator
from .fem import DiscreteFunction, SpaceKind, build_dofmap, interpolate
from .linalg import build_block_preconditioner, fgmres, pd_probe
from .mesh import FaceTag, SpaceTimeMesh, build_structured_mesh, refine, write_vtk
from .problems import get_problem

__version__ = "0.1.0"
