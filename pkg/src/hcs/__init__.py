"""Covariance steering for linear stochastic systems with hybrid transitions."""

from .errors import HcsError
from .hybrid_analytic import HybridSteeringSolution, build_hybrid_kernel, steer_hybrid_analytic
from .hybrid_model import (
    HybridSystemSpec,
    ModeSpec,
    SaltationEvent,
    TrajectoryBundle,
    TransitionSpec,
    rollout_deterministic,
    saltation_matrix,
)
from .nominal_ilqr import IlqrConfig, LinearizedPlan, NominalPlan, linearize_along, solve_hilqr
from .sdp_steering import SdpProblem, SdpSolution, recover_controllers, solve_sdp, steer_hybrid_sdp
from .sim_harness import EnsembleResult, FeedbackPlan, SimConfig, simulate_ensemble
from .smooth_steering import KernelBlocks, LinearSegment, SteeringSolution, hamiltonian_kernel, steer_smooth
from .systems import bouncing_ball, slip, system_from_dict

__version__ = "0.1.0"

__all__ = [
    "EnsembleResult",
    "FeedbackPlan",
    "HcsError",
    "HybridSteeringSolution",
    "HybridSystemSpec",
    "IlqrConfig",
    "KernelBlocks",
    "LinearSegment",
    "LinearizedPlan",
    "ModeSpec",
    "NominalPlan",
    "SaltationEvent",
    "SdpProblem",
    "SdpSolution",
    "SimConfig",
    "SteeringSolution",
    "TrajectoryBundle",
    "TransitionSpec",
    "bouncing_ball",
    "build_hybrid_kernel",
    "hamiltonian_kernel",
    "linearize_along",
    "recover_controllers",
    "rollout_deterministic",
    "saltation_matrix",
    "simulate_ensemble",
    "slip",
    "solve_hilqr",
    "solve_sdp",
    "steer_hybrid_analytic",
    "steer_hybrid_sdp",
    "steer_smooth",
    "system_from_dict",
]
