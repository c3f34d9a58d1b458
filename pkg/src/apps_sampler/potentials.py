"""Selection potentials evaluated at resampling boundaries.

Every potential is a callable ``potential(model, population, context)``
returning a :class:`PotentialOutput` with one ``log_psi`` per particle.
Particles that can no longer move (terminal or at the length cap) always
get ``log_psi = 0``.
"""

import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .exceptions import ConfigurationError, InputError
from .proposal import ProposalConfig, sample_paths
from .rng import POTENTIAL, ROLLOUT, CounterRNG
from .validation import check_choice, check_positive

FILTERS = ("all", "top-gap")


@dataclass
class PotentialOutput:
    log_psi: np.ndarray
    cost: int = 0

    def __post_init__(self):
        self.log_psi = np.asarray(self.log_psi, dtype=float)
        if not np.isfinite(self.log_psi).all():
            raise InputError("log_psi must be finite")


@dataclass(frozen=True)
class RolloutConfig:
    """Lookahead settings.

    ``proposal=None`` reuses the run's block proposal.  With
    ``ambiguity_filter="top-gap"`` only particles whose log-weight is within
    ``gap_threshold`` of the best one receive rollouts.
    """

    n_rollouts: int = 2
    horizon: int = 16
    proposal: ProposalConfig | None = None
    ambiguity_filter: str = "all"
    gap_threshold: float = 2.0

    def __post_init__(self):
        if isinstance(self.proposal, dict):
            object.__setattr__(self, "proposal", ProposalConfig.from_dict(self.proposal))
        check_positive(self.n_rollouts, "n_rollouts", integer=True)
        check_positive(self.horizon, "horizon", strict=False, integer=True)
        check_choice(self.ambiguity_filter, "ambiguity_filter", FILTERS)
        check_positive(self.gap_threshold, "gap_threshold", strict=False)


def _movable(model, population):
    return population.alive(model)


def unit_potential(population):
    """``psi = 1`` everywhere: plain weight-based selection."""
    return PotentialOutput(np.zeros(population.size), 0)


class UnitPotential:
    def __call__(self, model, population, context=None):
        return unit_potential(population)


def log_mean_exp(scores, axis=-1):
    scores = np.asarray(scores, dtype=float)
    return logsumexp(scores, axis=axis) - np.log(scores.shape[axis])


def rollout_scores(model, states, lengths, cfg, alpha, rng, boundary=0, slots=None, proposal=None,
                   max_tokens=None):
    """Power-corrected scores of ``R`` proposal rollouts from each state.

    Returns
    -------
    scores : ndarray (n, R)
        ``sum(alpha * log p - log q)`` over each rollout's tokens.
    cost : int
        Total number of rollout tokens generated.
    """
    proposal = proposal or cfg.proposal or ProposalConfig()
    n = len(states)
    slots = np.arange(n) if slots is None else np.asarray(slots, dtype=np.int64)
    scores = np.zeros((n, cfg.n_rollouts))
    cost = 0
    if cfg.horizon == 0 or n == 0:
        return scores, 0
    lengths = np.asarray(lengths, dtype=np.int64)
    for r in range(cfg.n_rollouts):
        _, _, lp, lq, new_len = sample_paths(
            model, states, lengths, cfg.horizon, proposal, rng, ROLLOUT, boundary, slots, sub=r,
            max_length=max_tokens, record=False,
        )
        scores[:, r] = alpha * lp - lq
        cost += int((new_len - lengths).sum())
    return scores, cost


def rollout_potential(model, population, cfg, alpha, rng, boundary=0, log_w=None, proposal=None):
    """Log-mean-exp of rollout scores for each selected particle."""
    rng = rng if isinstance(rng, CounterRNG) else CounterRNG(int(rng or 0))
    max_tokens = population.tokens.shape[1]
    selected = _movable(model, population)
    if cfg.ambiguity_filter == "top-gap":
        w = population.log_w if log_w is None else np.asarray(log_w, dtype=float)
        selected &= w >= w.max() - cfg.gap_threshold
    idx = np.flatnonzero(selected)
    log_psi = np.zeros(population.size)
    scores, cost = rollout_scores(
        model, population.states[idx], population.lengths[idx], cfg, alpha, rng, boundary, idx, proposal, max_tokens
    )
    if idx.size and cfg.horizon > 0:
        log_psi[idx] = log_mean_exp(scores, axis=1)
    return PotentialOutput(log_psi, cost)


class RolloutPotential:
    """Short proposal rollouts scored against the power target."""

    def __init__(self, config=None):
        self.config = config or RolloutConfig()

    def __call__(self, model, population, context):
        return rollout_potential(
            model, population, self.config, context.alpha, context.rng, context.boundary, context.log_w,
            self.config.proposal or context.proposal,
        )


class LearnedPotential:
    """Value-head potential on model features.

    With ``decode="aligned"`` the raw head outputs are passed through the
    head's groupwise centring/clipping/scaling over the movable particles,
    which is the same transform used when training and evaluating it.
    """

    def __init__(self, head, decode="aligned"):
        self.head = head
        self.decode = check_choice(decode, "decode", ("aligned", "raw"))

    def __call__(self, model, population, context=None):
        feats = np.asarray(model.features_batch(population.states), dtype=float)
        if feats.ndim != 2 or feats.shape[1] != self.head.n_features:
            raise ConfigurationError(
                f"head expects {self.head.n_features} features, model gives {feats.shape[-1]}"
            )
        movable = _movable(model, population)
        log_psi = np.zeros(population.size)
        idx = np.flatnonzero(movable)
        if idx.size:
            raw = self.head.predict(feats[idx])
            log_psi[idx] = self.head.decode(raw) if self.decode == "aligned" else raw
        return PotentialOutput(log_psi, 0)


def _prefix_key(tokens):
    data = np.asarray(tokens, dtype=np.int64).tobytes()
    return zlib.crc32(data) & 0x7FFFFFFF


class RandomPotential:
    """Arbitrary positive potential that is a fixed function of the prefix.

    ``log_psi`` is a seeded Gaussian keyed by a hash of the prefix tokens,
    so the same prefix always gets the same value within a seed.
    """

    def __init__(self, seed=0, scale=1.0):
        self.rng = CounterRNG(seed)
        self.scale = float(scale)

    def values(self, prefixes):
        keys = np.array([_prefix_key(p) for p in prefixes], dtype=np.int64)
        lengths = np.array([len(p) for p in prefixes], dtype=np.int64)
        return self.scale * self.rng.normal(POTENTIAL, 0, keys, lengths)

    def __call__(self, model, population, context=None):
        log_psi = np.where(_movable(model, population), self.values(population.prefixes()), 0.0)
        return PotentialOutput(log_psi, 0)


@dataclass
class OraclePotential:
    """Exact suffix value from oracle tables (or its reciprocal when ``inverse``)."""

    tables: object
    inverse: bool = False
    _sign: float = field(init=False)

    def __post_init__(self):
        self._sign = -1.0 if self.inverse else 1.0

    def __call__(self, model, population, context=None):
        log_psi = np.zeros(population.size)
        for i in np.flatnonzero(_movable(model, population)):
            j, k = self.tables.index(population.prefix(i))
            log_psi[i] = self._sign * self.tables.log_suffix[j][k]
        return PotentialOutput(log_psi, 0)


def build_potential(mode, rollout=None, head=None):
    """Potential for an ``apf_mode`` string."""
    if mode == "none":
        return UnitPotential()
    if mode == "rollout":
        return RolloutPotential(rollout)
    if mode == "learned":
        if head is None:
            raise ConfigurationError("learned mode needs a trained value head")
        return LearnedPotential(head)
    raise ConfigurationError(f"unknown potential mode {mode!r}")
