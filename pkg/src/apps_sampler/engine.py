"""Blockwise sequential Monte Carlo sampler for the power target.

A population of prefixes is extended one block at a time under a tractable
proposal, reweighted towards ``p**alpha``, and resampled whenever the
effective sample size collapses.  An optional selection potential looks
ahead at each resampling decision.
"""

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy.special import logsumexp

from .exceptions import ConfigurationError, InputError
from .proposal import ProposalConfig, sample_paths
from .rng import FINALIZE, PROPOSE, RESAMPLE, CounterRNG, Stream
from .validation import check_choice, check_log_weights, check_positive, check_same_length

APF_MODES = ("none", "rollout", "learned")
SCHEMES = ("multinomial", "systematic")
CORRECTIONS = ("heuristic", "auxiliary-corrected")
FINALIZE_RULES = ("weighted-sample", "best-score")


@dataclass(frozen=True)
class RunConfig:
    """Settings for one sampler run.

    ``resampling=False`` turns the sampler into plain sequential importance
    sampling, which is what the weight-identity and rate checks need.
    """

    alpha: float = 4.0
    block_size: int = 16
    ess_threshold: float = 0.5
    min_particles: int = 8
    max_particles: int = 32
    max_tokens: int = 3072
    proposal: ProposalConfig = field(default_factory=ProposalConfig)
    apf_mode: str = "none"
    apf_strength: float = 0.5
    resample_scheme: str = "systematic"
    correction_mode: str = "heuristic"
    elite_preservation: bool = False
    dynamic_allocation: bool = False
    finalize_rule: str = "weighted-sample"
    resampling: bool = True
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.proposal, dict):
            object.__setattr__(self, "proposal", ProposalConfig.from_dict(self.proposal))
        check_positive(self.alpha, "alpha")
        if self.alpha < 1:
            raise ConfigurationError(f"alpha must be >= 1, got {self.alpha}")
        check_positive(self.block_size, "block_size", integer=True)
        check_positive(self.max_tokens, "max_tokens", integer=True)
        check_positive(self.min_particles, "min_particles", integer=True)
        check_positive(self.max_particles, "max_particles", integer=True)
        if self.min_particles > self.max_particles:
            raise ConfigurationError("min_particles must not exceed max_particles")
        check_positive(self.ess_threshold, "ess_threshold")
        if self.ess_threshold > 1:
            raise ConfigurationError("ess_threshold must lie in (0, 1]")
        check_positive(self.apf_strength, "apf_strength", strict=False)
        check_choice(self.apf_mode, "apf_mode", APF_MODES)
        check_choice(self.resample_scheme, "resample_scheme", SCHEMES)
        check_choice(self.correction_mode, "correction_mode", CORRECTIONS)
        check_choice(self.finalize_rule, "finalize_rule", FINALIZE_RULES)
        check_positive(self.seed, "seed", strict=False, integer=True)

    @property
    def max_blocks(self):
        return math.ceil(self.max_tokens / self.block_size)

    def to_dict(self):
        d = asdict(self)
        d["proposal"] = asdict(self.proposal)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown run settings: {sorted(unknown)}")
        return cls(**d)

    def with_updates(self, **kw):
        return replace(self, **kw)


@dataclass
class Particle:
    """Read-only view of one population member."""

    prefix: tuple
    state: object
    log_w: float
    ancestry_score: float
    alive: bool
    rng_stream: int


class Population:
    """Struct-of-arrays particle population.

    Attributes
    ----------
    tokens : ndarray (P, max_tokens), -1 padded
    lengths, log_w, ancestry, log_p, log_q : ndarray (P,)
        ``log_p`` and ``log_q`` accumulate over the whole trajectory and are
        copied through resampling with the prefix.
    states : ndarray (P,)
    """

    def __init__(self, tokens, lengths, states, log_w, ancestry, log_p, log_q):
        self.tokens = tokens
        self.lengths = lengths
        self.states = states
        self.log_w = log_w
        self.ancestry = ancestry
        self.log_p = log_p
        self.log_q = log_q

    @classmethod
    def initial(cls, model, n, prompt, max_tokens):
        return cls(
            np.full((n, max_tokens), -1, dtype=np.int64),
            np.zeros(n, dtype=np.int64),
            model.initial_states(n, prompt),
            np.zeros(n),
            np.zeros(n),
            np.zeros(n),
            np.zeros(n),
        )

    @property
    def size(self):
        return len(self.lengths)

    def alive(self, model):
        return ~model.terminal_batch(self.states) & (self.lengths < self.tokens.shape[1])

    def take(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Population(
            self.tokens[idx].copy(),
            self.lengths[idx].copy(),
            self.states[idx].copy(),
            self.log_w[idx].copy(),
            self.ancestry[idx].copy(),
            self.log_p[idx].copy(),
            self.log_q[idx].copy(),
        )

    def prefix(self, i):
        return tuple(int(t) for t in self.tokens[i, : self.lengths[i]])

    def prefixes(self):
        return [self.prefix(i) for i in range(self.size)]

    def particle(self, i, model=None):
        alive = bool(self.lengths[i] < self.tokens.shape[1])
        if model is not None:
            alive = alive and not model.is_terminal(self.states[i])
        return Particle(self.prefix(i), self.states[i], float(self.log_w[i]), float(self.ancestry[i]), alive, i)


@dataclass
class BoundaryTrace:
    """What happened at one block boundary."""

    boundary: int
    pre_size: int
    post_size: int
    ess: float
    ess_provisional: float
    ambiguity: float
    resampled: bool
    ancestors: list | None = None
    unique_ancestors: int | None = None
    log_psi: list | None = None
    potential_cost: int = 0
    min_particles: int = 1

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class BoundaryContext:
    """Information handed to a selection potential at a boundary."""

    boundary: int
    alpha: float
    proposal: ProposalConfig
    max_tokens: int
    rng: CounterRNG
    log_w: np.ndarray


@dataclass
class RunResult:
    completion: tuple
    index: int
    population: Population
    trace: list

    def diagnostics(self):
        return diagnostics(self.trace)

    def trace_jsonl(self):
        lines = [json.dumps(t.to_dict(), sort_keys=True) for t in self.trace]
        summary = {"completion": list(self.completion), "index": self.index, "diagnostics": self.diagnostics()}
        lines.append(json.dumps(summary, sort_keys=True))
        return "\n".join(lines) + "\n"


def propose_block(model, state, proposal, block_size, rng, boundary=0, slot=0, length=0, max_tokens=None):
    """Draw one block for a single particle.

    Returns ``(block, log_q, log_p)``.  The draw is identical to what the
    vectorised propagation gives particle ``slot`` at ``boundary``.
    """
    states = np.empty(1, dtype=object)
    states[0] = state
    tokens, _, lp, lq, _ = sample_paths(
        model, states, [length], block_size, proposal, rng, PROPOSE, boundary, [slot], max_length=max_tokens
    )
    block = [int(t) for t in tokens[0] if t >= 0]
    return block, float(lq[0]), float(lp[0])


def propagate(model, population, proposal, block_size, rng, boundary):
    """Extend every live particle by one block in place.

    Returns the per-particle block ``log_p`` and ``log_q`` (zero for frozen
    particles).
    """
    max_tokens = population.tokens.shape[1]
    start = population.lengths.copy()
    tokens, states, lp, lq, lengths = sample_paths(
        model,
        population.states,
        start,
        block_size,
        proposal,
        rng,
        PROPOSE,
        boundary,
        np.arange(population.size),
        max_length=max_tokens,
    )
    for i in np.flatnonzero(lengths > start):
        population.tokens[i, start[i] : lengths[i]] = tokens[i, : lengths[i] - start[i]]
    population.states = states
    population.lengths = lengths
    population.log_p += lp
    population.log_q += lq
    return lp, lq


def reweight(log_w, log_p, log_q, alpha):
    """Add the incremental power-target log-weight ``alpha*log_p - log_q``."""
    return np.asarray(log_w, dtype=float) + alpha * np.asarray(log_p, dtype=float) - np.asarray(log_q, dtype=float)


def normalized_weights(log_scores):
    s = check_log_weights(log_scores)
    w = np.exp(s - s.max())
    return w / w.sum()


def ess(log_weights):
    """Effective sample size ``1 / sum(w_bar**2)`` of unnormalised log-weights."""
    s = check_log_weights(log_weights, "log_weights")
    value = float(np.exp(2 * logsumexp(s) - logsumexp(2 * s)))
    return min(max(value, 1.0), float(s.size))


def selection_scores(log_w, log_psi, eta):
    """Augmented selection scores ``log_w + eta * log_psi``."""
    log_w = np.asarray(log_w, dtype=float)
    log_psi = np.asarray(log_psi, dtype=float)
    check_same_length(log_w, log_psi, ("log_w", "log_psi"))
    if not np.isfinite(log_psi).all():
        raise InputError("log_psi must be finite")
    if eta == 0:
        return log_w.copy()
    return log_w + eta * log_psi


def resample(log_scores, n_out, scheme="systematic", rng=None):
    """Draw ``n_out`` ancestor indices with probabilities proportional to ``exp(log_scores)``.

    Parameters
    ----------
    rng : Stream or CounterRNG
        Source of uniforms.  A bare ``CounterRNG`` is read at boundary 0.
    """
    rho = normalized_weights(log_scores)
    check_positive(n_out, "n_out", integer=True)
    check_choice(scheme, "scheme", SCHEMES)
    if rng is None:
        rng = CounterRNG(0)
    if isinstance(rng, CounterRNG):
        rng = rng.stream(RESAMPLE, 0)
    cdf = np.cumsum(rho)
    cdf /= cdf[-1]
    if scheme == "multinomial":
        u = rng.uniform(n_out)
    else:
        u = (rng.uniform() + np.arange(n_out)) / n_out
    idx = np.searchsorted(cdf, u, side="right")
    return np.minimum(idx, rho.size - 1)


def draw_ancestors(log_scores, n_out, scheme, rng, elite=None):
    """Ancestors for one resampling step, optionally pinning ``elite`` in slot 0."""
    if elite is None:
        return resample(log_scores, n_out, scheme, rng)
    if n_out == 1:
        return np.array([elite], dtype=np.int64)
    rest = resample(log_scores, n_out - 1, scheme, rng)
    return np.concatenate([[elite], rest]).astype(np.int64)


def apply_resample(population, ancestors, log_psi=None, eta=0.0, correction_mode="heuristic"):
    """Copy parents into a new population and reset local weights.

    Heuristic mode zeroes every child weight.  Auxiliary-corrected mode sets
    the child weight to ``-eta * log_psi[parent]`` so that the potential's
    influence is removed again at the next reweighting.
    """
    check_choice(correction_mode, "correction_mode", CORRECTIONS)
    ancestors = np.asarray(ancestors, dtype=np.int64)
    if ancestors.ndim != 1 or ancestors.size == 0:
        raise InputError("ancestors must be a non-empty 1-D index array")
    if ancestors.min() < 0 or ancestors.max() >= population.size:
        raise InputError(f"ancestor index out of range [0, {population.size})")
    children = population.take(ancestors)
    if correction_mode == "heuristic" or log_psi is None or eta == 0:
        children.log_w = np.zeros(ancestors.size)
    else:
        children.log_w = -eta * np.asarray(log_psi, dtype=float)[ancestors]
    return children


def ambiguity(log_scores, n_particles=None):
    """Normalised entropy ``H(pi_bar) / log P`` of the selection distribution."""
    pi = normalized_weights(log_scores)
    n = pi.size if n_particles is None else int(n_particles)
    if n <= 1:
        return 0.0
    nz = pi[pi > 0]
    h = float(-(nz * np.log(nz)).sum())
    return float(np.clip(h / math.log(n), 0.0, 1.0))


def allocate(a, p_min, p_max):
    """Population size for the next resampling: clipped linear map of ambiguity."""
    if not 0.0 <= a <= 1.0:
        raise InputError(f"ambiguity must lie in [0, 1], got {a}")
    if not 1 <= p_min <= p_max:
        raise ConfigurationError("need 1 <= p_min <= p_max")
    # half-up rounding so that 0.5 steps land on the upper integer
    return int(min(max(p_min + math.floor((p_max - p_min) * a + 0.5), p_min), p_max))


def run_apps(model, prompt, config, potential=None, observer=None):
    """Run the sampler once.

    Parameters
    ----------
    model : AutoregressiveModel
    prompt : sequence of tokens or None
    config : RunConfig
    potential : callable, optional
        ``potential(model, population, context) -> PotentialOutput``.
        Required unless ``config.apf_mode == "none"``.
    observer : callable, optional
        Called as ``observer(boundary, population, output)`` each time the
        potential is evaluated.

    Returns
    -------
    RunResult
    """
    if not isinstance(config, RunConfig):
        raise ConfigurationError("config must be a RunConfig")
    if config.apf_mode != "none" and potential is None:
        raise ConfigurationError(f"apf_mode={config.apf_mode!r} needs a potential")
    rng = CounterRNG(config.seed)
    pop = Population.initial(model, config.max_particles, prompt, config.max_tokens)
    target = config.max_particles
    trace = []
    j = 0
    while pop.alive(model).any():
        j += 1
        lp, lq = propagate(model, pop, config.proposal, config.block_size, rng, j)
        inc = config.alpha * lp - lq
        pop.log_w = pop.log_w + inc
        pop.ancestry = pop.ancestry + inc
        p_j = pop.size
        ess_prov = ess(pop.log_w)
        scores = pop.log_w
        log_psi = None
        cost = 0
        imminent = config.resampling and ess_prov < config.ess_threshold * p_j
        if imminent and config.apf_mode != "none":
            ctx = BoundaryContext(j, config.alpha, config.proposal, config.max_tokens, rng, pop.log_w.copy())
            out = potential(model, pop, ctx)
            log_psi = np.asarray(out.log_psi, dtype=float)
            cost = int(out.cost)
            if observer is not None:
                observer(j, pop, out)
            scores = selection_scores(pop.log_w, log_psi, config.apf_strength)
        a_j = ambiguity(scores, p_j)
        if config.dynamic_allocation:
            target = allocate(a_j, config.min_particles, config.max_particles)
        ess_gate = ess(scores)
        resampled = config.resampling and ess_gate < config.ess_threshold * p_j
        ancestors = None
        if resampled:
            elite = int(np.argmax(pop.ancestry)) if config.elite_preservation else None
            ancestors = draw_ancestors(scores, target, config.resample_scheme, rng.stream(RESAMPLE, j), elite)
            pop = apply_resample(pop, ancestors, log_psi, config.apf_strength, config.correction_mode)
        trace.append(
            BoundaryTrace(
                boundary=j,
                pre_size=p_j,
                post_size=pop.size,
                ess=ess_gate,
                ess_provisional=ess_prov,
                ambiguity=a_j,
                resampled=bool(resampled),
                ancestors=None if ancestors is None else ancestors.tolist(),
                unique_ancestors=None if ancestors is None else int(np.unique(ancestors).size),
                log_psi=None if log_psi is None else log_psi.tolist(),
                potential_cost=cost,
                min_particles=config.min_particles,
            )
        )
    index = finalize(pop, config.finalize_rule, rng)
    return RunResult(pop.prefix(index), index, pop, trace)


def finalize(population, rule, rng):
    """Pick the returned particle: a draw from ``exp(log_w)`` or the best ancestry score."""
    check_choice(rule, "finalize_rule", FINALIZE_RULES)
    if rule == "best-score":
        return int(np.argmax(population.ancestry))
    stream = rng if isinstance(rng, Stream) else rng.stream(FINALIZE, 0)
    return int(resample(population.log_w, 1, "multinomial", stream)[0])


def diagnostics(trace):
    """Population and allocation summaries over a run trace.

    Returns a dict with the mean active population, the fraction of blocks
    run at the minimum size, the mean ambiguity, the mean absolute size
    change between consecutive blocks, counts of increases and decreases,
    and the mean number of distinct ancestors per resampling step (``None``
    if the run never resampled).
    """
    if not trace:
        raise InputError("diagnostics need a non-empty trace")
    sizes = np.array([t.pre_size for t in trace], dtype=float)
    diffs = np.diff(sizes)
    uniq = [t.unique_ancestors for t in trace if t.resampled]
    return {
        "mean_active_population": float(sizes.mean()),
        "fraction_at_min": float(np.mean([t.pre_size == t.min_particles for t in trace])),
        "mean_ambiguity": float(np.mean([t.ambiguity for t in trace])),
        "mean_abs_change": float(np.abs(diffs).mean()) if diffs.size else 0.0,
        "increases": int((diffs > 0).sum()),
        "decreases": int((diffs < 0).sum()),
        "mean_unique_ancestors": float(np.mean(uniq)) if uniq else None,
        "n_blocks": len(trace),
        "n_resamples": len(uniq),
    }
