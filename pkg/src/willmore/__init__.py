"""Hybrid neural/variational phase-field Willmore flow on periodic grids.

The package combines a minimizing-movement time discretization of Willmore
flow with a learned convolution-plus-pointwise-network approximation of one
mean curvature step, alongside classical reference schemes and analytic
circle oracles for validation.
"""

from .grid import (
    GridSpec,
    NodalField,
    StencilKernel,
    convolve,
    convolve_adjoint,
    convolve_periodic,
    convolve_spectral,
    discrete_l2_dist,
    discrete_l2_norm,
    physical_l2_norm,
    upsample_kernel_bilinear,
)
from .phase_field import (
    Box,
    Capsule,
    Cross,
    Difference,
    HalfSpace,
    Intersection,
    PhaseFieldParams,
    Shape,
    Sphere,
    ThickDisk,
    Union,
    cube,
    double_well,
    double_well_prime,
    double_well_second,
    optimal_profile,
    perimeter_energy,
    phase_field_from_shape,
    shape_sdf,
    sphere_phase_field,
    tube_union,
)
from .neural import (
    MlpParams,
    NeuralMcfOperator,
    TrainingConfig,
    TrainingError,
    apply_operator,
    load_checkpoint,
    mlp_derivative,
    mlp_forward,
    mlp_second_derivative,
    operator_jvp,
    operator_vjp,
    save_checkpoint,
    train_operator,
    train_progressive,
    training_loss,
)
from .reference import (
    AllenCahnStepConfig,
    ConvergenceError,
    ImplicitMcfOperator,
    SemiImplicitMcfOperator,
    circle_radius_mcf,
    circle_radius_willmore,
    heat_step_spectral,
    mbo_like_step,
    mcf_implicit_step,
    mcf_semi_implicit_step,
    soft_threshold_forward,
    soft_threshold_inverse,
)
from .solver import (
    FlowTrajectory,
    WillmoreConfig,
    apply_mask_constraint,
    mask_from_shape,
    newton_cg_step,
    outer_energy,
    outer_gradient,
    outer_hvp,
    run_flow,
    willmore_proxy,
)
from .storage import load_field, load_kernel, save_field, save_kernel

__version__ = "0.1.0"
