"""Differentiable nominal and robust LQR layers on a dense SDP solver."""

from .autodiff import (
    ParamGradient,
    fd_oracle,
    grad_nominal_layer,
    grad_robust_layer,
    grad_through_gain,
)
from .errors import (
    DegenerateSolutionError,
    ExpertGenerationError,
    GradientError,
    InputError,
    NumericalError,
    RobustLqrError,
    SolverError,
)
from .learning import (
    DemoSet,
    ExpertSpec,
    IterationRecord,
    TrainConfig,
    TrainState,
    generate_demos,
    generate_expert,
    imitation_loss,
    model_loss,
    rmsprop_step,
    sign_test_pvalue,
    train_adp,
    train_imitation,
    validation_cost,
)
from .linsys import (
    GainPolicy,
    LinearSystem,
    Trajectory,
    UncertaintyEllipsoid,
    quadratic_cost,
    rollout,
    spectral_radius,
)
from .lmi_layers import (
    build_nominal_lmi,
    build_robust_sdp,
    recover_gain,
    recover_p,
    worst_case_cost,
    xi_from_solution,
)
from .riccati import (
    AreSolution,
    FiniteHorizonSolution,
    finite_horizon_grad,
    lqr_gain,
    solve_are,
    solve_finite_horizon,
)
from .sdp import SdpProblem, SdpSolution, solve

__all__ = [
    "AreSolution",
    "DegenerateSolutionError",
    "DemoSet",
    "ExpertGenerationError",
    "ExpertSpec",
    "FiniteHorizonSolution",
    "GainPolicy",
    "GradientError",
    "InputError",
    "IterationRecord",
    "LinearSystem",
    "NumericalError",
    "ParamGradient",
    "RobustLqrError",
    "SdpProblem",
    "SdpSolution",
    "SolverError",
    "TrainConfig",
    "TrainState",
    "Trajectory",
    "UncertaintyEllipsoid",
    "build_nominal_lmi",
    "build_robust_sdp",
    "fd_oracle",
    "finite_horizon_grad",
    "generate_demos",
    "generate_expert",
    "grad_nominal_layer",
    "grad_robust_layer",
    "grad_through_gain",
    "imitation_loss",
    "lqr_gain",
    "model_loss",
    "quadratic_cost",
    "recover_gain",
    "recover_p",
    "rmsprop_step",
    "rollout",
    "sign_test_pvalue",
    "solve",
    "solve_are",
    "solve_finite_horizon",
    "spectral_radius",
    "train_adp",
    "train_imitation",
    "validation_cost",
    "worst_case_cost",
    "xi_from_solution",
]

__version__ = "0.1.0"
