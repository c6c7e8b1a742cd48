"""Solver suite for quasi variational-hemivariational inequalities.

Instantiated as a 2D generalized-Newtonian (Bingham-type) Stokes flow with a
nonmonotone slip wall and an implicit obstacle constraint set: an inner
strongly monotone variational inequality nested in an outer fixed-point
iteration on the constraint anchor and the boundary subgradient selection.
"""

from .constitutive import ConstitutiveLaw, SymTensor2
from .fem import ConstraintFunctionals, DiscreteProblem, VelocitySpace, assemble, build_space
from .mesh import Mesh, generate_rectangle, load_mesh, save_mesh
from .potentials import (ConvexPotentialSpec, SlipModel, SlipPotential, WeightFunction,
                         jlambda_deriv, jlambda_value)
from .qvhi_solver import (HypothesisConstants, QVHIState, SolveReport, check_smallness,
                          invariant_radii, solve_qvhi)
from .vi_solver import VIProblem, VIResult, solve_vi

__version__ = "0.1.0"

__all__ = [
    "ConstitutiveLaw", "SymTensor2",
    "ConstraintFunctionals", "DiscreteProblem", "VelocitySpace", "assemble", "build_space",
    "Mesh", "generate_rectangle", "load_mesh", "save_mesh",
    "ConvexPotentialSpec", "SlipModel", "SlipPotential", "WeightFunction",
    "jlambda_deriv", "jlambda_value",
    "HypothesisConstants", "QVHIState", "SolveReport", "check_smallness",
    "invariant_radii", "solve_qvhi",
    "VIProblem", "VIResult", "solve_vi",
    "__version__",
]
