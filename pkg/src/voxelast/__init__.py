"""Differentiable voxel-grid elasticity with learned quadrature."""

from .adjoint import (
    AdjointResult,
    LossPartials,
    ParamSet,
    adjoint_solve,
    displacement_loss_gradient,
    mixed_loss_gradient,
)
from .fem import (
    DirichletRegion,
    FemProblem,
    LoadRegion,
    SimSetup,
    apply_loads,
    build_dofs,
    newton_solve,
)
from .grid import (
    CELL_BOUNDARY,
    CELL_EMPTY,
    CELL_FULL,
    SmoothingConfig,
    VoxelGrid,
    classify_cells,
    extract_isosurface,
    gaussian_precondition,
    sample_sdf,
)
from .material import Material, StiffnessField, snh_energy, snh_hessian_F, snh_hessian_S, snh_pk1
from .mixedfem import (
    MixedState,
    PenaltyConfig,
    constraint_residual,
    mixed_newton_solve,
    update_rotations,
)
from .optim import (
    OptimProblem,
    PhysLossConfig,
    Schedule,
    optimize,
    phys_loss_displacement,
    phys_loss_mixed,
    recon_loss,
    surface_regularizer,
)
from .quadnet import (
    QuadNetParams,
    TrainConfig,
    load_params,
    rule_jacobian_wrt_sdf,
    save_params,
    train,
)
from .quadrature import (
    QuadratureRule,
    TestBasis,
    clip_rule,
    conditioning,
    gauss_legendre_rule,
    ground_truth_integrals,
    moment_fit_weights,
    quad_error,
)
from .rules import CellRules, build_cell_rules

__all__ = [
    "AdjointResult", "LossPartials", "ParamSet", "adjoint_solve",
    "displacement_loss_gradient", "mixed_loss_gradient",
    "DirichletRegion", "FemProblem", "LoadRegion", "SimSetup",
    "apply_loads", "build_dofs", "newton_solve",
    "CELL_BOUNDARY", "CELL_EMPTY", "CELL_FULL", "SmoothingConfig", "VoxelGrid",
    "classify_cells", "extract_isosurface", "gaussian_precondition", "sample_sdf",
    "Material", "StiffnessField", "snh_energy", "snh_hessian_F", "snh_hessian_S", "snh_pk1",
    "MixedState", "PenaltyConfig", "constraint_residual", "mixed_newton_solve",
    "update_rotations",
    "OptimProblem", "PhysLossConfig", "Schedule", "optimize",
    "phys_loss_displacement", "phys_loss_mixed", "recon_loss", "surface_regularizer",
    "QuadNetParams", "TrainConfig", "load_params", "rule_jacobian_wrt_sdf",
    "save_params", "train",
    "QuadratureRule", "TestBasis", "clip_rule", "conditioning",
    "gauss_legendre_rule", "ground_truth_integrals", "moment_fit_weights", "quad_error",
    "CellRules", "build_cell_rules",
]

__version__ = "0.1.0"
