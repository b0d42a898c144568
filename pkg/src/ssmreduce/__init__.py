"""Balanced truncation of linear state-space systems, applied while training LRU-style models."""

from .exceptions import (
    ConditioningError,
    ConfigError,
    ConvergenceError,
    DimensionError,
    FormatError,
    IncomparableError,
    InvariantError,
    MinimalityError,
    NumericalError,
    SSMReduceError,
    StabilityError,
)
from .lti import (
    DenseSystem,
    DiagonalSystem,
    GramianPair,
    LivSampleSet,
    average_dynamics,
    gramian_dense,
    gramian_diagonal,
    gramians,
    hinf_distance,
    hinf_estimate,
    simulate,
)
from .reduction import (
    BalancedRealization,
    HankelSpectrum,
    ReductionResult,
    balancing_transform,
    choose_rank,
    error_bound,
    hankel_singular_values,
    reduce_system,
    rediagonalize,
    truncate,
)
from .tracking import TrajectoryLog, assign_trajectories, energy_fraction, hankel_operator, weyl_bound
from .ssm import LruBlock, LruModel, ModelConfig, backward, block_forward, extract_system, model_forward, write_back
from .train import ReductionEvent, ReductionPolicy, RunRecord, TrainConfig, lr_schedule, train_run
from .estimator import BalancedTruncation, LruClassifier, LruRegressor

__version__ = "0.1.0"
