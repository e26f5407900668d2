"""Smooth stochastic interpolation between population snapshots.

Positions observed at N+1 times are joined by a controlled phase-space
diffusion whose noise acts on velocities only. Two policies (one per time
direction) are trained by alternating half-bridge projections under a
mean-matching regression objective; sampling pushes the earliest snapshot
forward through the learned dynamics, producing smooth position paths that
hit every snapshot distribution on the way.
"""

from .bregman import (
    BISchedule,
    BPTask,
    TrainState,
    build_schedule,
    init_state,
    load_state,
    opt_subset,
    sample,
    save_state,
    train,
)
from .config import ConfigError, RunConfig
from .data import (
    DataError,
    Marginal,
    MarginalSet,
    gen_gmm,
    gen_petal,
    gen_semicircle,
    leave_out,
    load_csv,
    save_csv,
    split,
)
from .dynamics import (
    PhaseBatch,
    SimulationDivergence,
    TimeGrid,
    TrajectoryCache,
    em_backward_step,
    em_forward_step,
    knot_times,
    simulate,
)
from .langevin import LangevinConfig, velocity_langevin
from .metrics import (
    MetricConfig,
    MetricReport,
    energy_distance,
    evaluate,
    max_swd,
    mmd,
    swd,
    w1_small,
)
from .nnet import (
    ArchConfig,
    PolicyNet,
    adamw_step,
    load_checkpoint,
    net_backprop,
    net_eval,
    net_init,
    param_count,
    policy_eval,
    save_checkpoint,
)
from .objective import TransitionBatch, mm_loss_backward, mm_loss_forward, sample_transitions
from .rng import SeedTree

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "BISchedule",
    "BPTask",
    "ConfigError",
    "DataError",
    "LangevinConfig",
    "Marginal",
    "MarginalSet",
    "MetricConfig",
    "MetricReport",
    "PhaseBatch",
    "PolicyNet",
    "RunConfig",
    "SeedTree",
    "SimulationDivergence",
    "TimeGrid",
    "TrainState",
    "TrajectoryCache",
    "TransitionBatch",
    "adamw_step",
    "build_schedule",
    "em_backward_step",
    "em_forward_step",
    "energy_distance",
    "evaluate",
    "gen_gmm",
    "gen_petal",
    "gen_semicircle",
    "init_state",
    "knot_times",
    "leave_out",
    "load_checkpoint",
    "load_csv",
    "load_state",
    "max_swd",
    "mm_loss_backward",
    "mm_loss_forward",
    "mmd",
    "net_backprop",
    "net_eval",
    "net_init",
    "opt_subset",
    "policy_eval",
    "param_count",
    "sample",
    "sample_transitions",
    "save_checkpoint",
    "save_csv",
    "save_state",
    "simulate",
    "split",
    "swd",
    "train",
    "velocity_langevin",
    "w1_small",
]
