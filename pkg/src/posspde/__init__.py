"""Positivity-preserving P1 finite element schemes for the stochastic heat
equation with multiplicative noise.

The modules follow the computation: :mod:`mesh` and :mod:`assembly` build the
mass-lumped discretization, :mod:`noise` the coupled Brownian increments,
:mod:`linalg` the implicit solves, :mod:`schemes` the one-step maps and
:mod:`experiments` the Monte Carlo studies.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConfigurationError,
    InputError,
    NumericalError,
    SpdeError,
    UnsupportedOperationError,
)
from .mesh import Mesh, build_interval_mesh, build_unit_square_mesh, mesh_from_arrays  # noqa: E402
from .assembly import FemOperators, NodalField, assemble, interpolate, norm_h  # noqa: E402
from .noise import BrownianLattice, NoiseModel, builtin_model  # noqa: E402
from .linalg import ImplicitSolver, expm_action  # noqa: E402
from .schemes import SchemeId, Stepper  # noqa: E402
from .experiments import (  # noqa: E402
    convergence_study,
    energy_check,
    error_metric,
    nonneg_census,
    run_path,
)

__all__ = [
    "__version__",
    "SpdeError", "ConfigurationError", "InputError", "NumericalError",
    "UnsupportedOperationError",
    "Mesh", "build_interval_mesh", "build_unit_square_mesh", "mesh_from_arrays",
    "FemOperators", "NodalField", "assemble", "interpolate", "norm_h",
    "BrownianLattice", "NoiseModel", "builtin_model",
    "ImplicitSolver", "expm_action",
    "SchemeId", "Stepper",
    "convergence_study", "energy_check", "error_metric", "nonneg_census", "run_path",
]
