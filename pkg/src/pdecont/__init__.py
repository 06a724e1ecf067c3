"""Pseudo-arclength continuation and bifurcation analysis of 2D elliptic PDE
systems discretized with P1 triangular finite elements."""

from .assembly import (AssembledSystem, BoundaryConditionSet, CoefficientSet,
                       JacobianCoefficients, assemble_advection, assemble_bc,
                       assemble_load, assemble_mass, assemble_stiffness,
                       assemble_system, neumann_bc, stiff_spring_dirichlet)
from .engine import (BifPoint, BranchRecord, ContinuationSettings,
                     ContinuationState, ConvergenceError, cont, default_xi,
                     findbif, init_step, pmcont, swibra, tint, xi_inner, xi_norm)
from .library import REGISTRY, make_problem, make_state
from .linalg import (BorderedSystem, RankOneCoupling, SingularSystemError,
                     SpectralData, det_sign, eigs_near_zero, solve,
                     solve_bordered, solve_rank_one)
from .mesh import (ErrorEstimate, Mesh, MeshError, RefinementMap, adapt,
                   error_indicator, export_mesh, gradients, import_mesh,
                   interp_node_to_tri, interp_tri_to_node, make_rect_mesh,
                   mark_by_error, refine, triint)
from .problem import ProblemDef, jac_check, jacobian, residual
from .session import (ConfigError, load_point, meshcheck, parse_config,
                      read_branch, save_point)

__version__ = "0.1.0"
