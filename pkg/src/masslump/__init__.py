"""Mass-lumped Schur complement solvers for L2-regularized elliptic optimal control."""
from .control import ControlProblem, Solution, control_cost, residual_check, setup, solve
from .fem import FeFunction, TargetField, assemble, l2_error_vs_target
from .mesh import MeshHierarchy, SimplicialMesh, bisect, build_structured, refine_uniform
from .nested import NestedConfig, fit_rate, prolong, run_cascadic, run_nested, run_nonnested
from .solver import SchurOperator, StopRule, build_schur, pcg
from .sparse import CsrMatrix, set_workers

__version__ = "0.1.0"

__all__ = [
    "ControlProblem", "CsrMatrix", "FeFunction", "MeshHierarchy", "NestedConfig", "SchurOperator",
    "SimplicialMesh", "Solution", "StopRule", "TargetField", "assemble", "bisect", "build_schur",
    "build_structured", "control_cost", "fit_rate", "l2_error_vs_target", "pcg", "prolong",
    "refine_uniform", "residual_check", "run_cascadic", "run_nested", "run_nonnested",
    "set_workers", "setup", "solve",
]
