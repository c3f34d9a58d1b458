"""Blockwise particle sampling from sequence-level power distributions."""

from .engine import (
    BoundaryTrace,
    Population,
    RunConfig,
    RunResult,
    allocate,
    ambiguity,
    apply_resample,
    diagnostics,
    ess,
    propose_block,
    resample,
    reweight,
    run_apps,
    selection_scores,
)
from .estimators import APPSSampler
from .exceptions import (
    APPSError,
    ConfigurationError,
    DegeneratePopulationError,
    DivergenceUndefinedError,
    EnumerationSizeError,
    InputError,
    TrainingError,
)
from .lm import AutoregressiveModel, TabularModel, ToyModelSpec, build_model
from .oracle import (
    chi_square,
    covariance_identity,
    effective_proposal,
    enumerate_power_target,
    next_block_conditional,
    truncated_suffix_value,
)
from .potentials import (
    LearnedPotential,
    OraclePotential,
    PotentialOutput,
    RandomPotential,
    RolloutConfig,
    RolloutPotential,
    UnitPotential,
)
from .proposal import ProposalConfig
from .rng import CounterRNG
from .value_head import TrainConfig, ValueHead, ValueHeadRegressor

__version__ = "0.1.0"
