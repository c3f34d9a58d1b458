"""Exhaustive enumeration of the sequence-level power target.

For small instances every quantity the sampler approximates can be computed
exactly: prefix masses, suffix values, the normaliser, prefix marginals and
next-block conditionals.  Everything is accumulated in log space.

Three quantities are computed along separate paths so they can be checked
against each other: prefix masses by forward accumulation, suffix values by
backward recursion, and prefix marginals by summing the normalised full-
sequence target over descendants.
"""

from dataclasses import dataclass
import json

import numpy as np
from scipy.special import logsumexp

from .exceptions import DivergenceUndefinedError, EnumerationSizeError, InputError
from .lm import TabularModel
from .proposal import proposal_logprobs

DEFAULT_ENUMERATION_CAP = 10**6


@dataclass
class FiniteDistribution:
    """Distribution over an explicit list of outcomes."""

    support: list
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        if len(self.support) != self.probs.size:
            raise InputError("support and probs differ in length")
        if (self.probs < 0).any() or abs(self.probs.sum() - 1.0) > 1e-9:
            raise InputError("probabilities must be non-negative and sum to 1")

    def prob(self, outcome):
        return float(self.probs[self.support.index(outcome)])

    def as_dict(self):
        return dict(zip(self.support, self.probs.tolist()))

    def aligned(self, other):
        """Probabilities of ``other`` reordered to this support."""
        lookup = dict(zip(other.support, other.probs))
        return np.array([lookup.get(s, 0.0) for s in self.support])


def _as_arrays(target, proposal):
    if isinstance(target, FiniteDistribution) and isinstance(proposal, FiniteDistribution):
        return target.probs, target.aligned(proposal)
    t = np.asarray(target.probs if isinstance(target, FiniteDistribution) else target, dtype=float)
    p = np.asarray(proposal.probs if isinstance(proposal, FiniteDistribution) else proposal, dtype=float)
    if t.shape != p.shape:
        raise InputError("target and proposal must be aligned")
    return t, p


def chi_square(target, proposal):
    """chi^2(target || proposal) = sum target^2 / proposal - 1."""
    t, p = _as_arrays(target, proposal)
    mass = t > 0
    if (p[mass] <= 0).any():
        raise DivergenceUndefinedError("proposal assigns zero mass where the target has mass")
    value = float(np.sum(t[mass] ** 2 / p[mass])) - 1.0
    return max(value, 0.0)


def effective_proposal(proposal, psi):
    """Tilt ``proposal`` by a strictly positive potential ``psi``."""
    q = proposal.probs if isinstance(proposal, FiniteDistribution) else np.asarray(proposal, dtype=float)
    psi = np.asarray(psi, dtype=float)
    if psi.shape != q.shape:
        raise InputError("psi must align with the proposal support")
    if not (psi > 0).all() or not np.isfinite(psi).all():
        raise InputError("psi must be finite and strictly positive")
    tilted = q * psi
    support = proposal.support if isinstance(proposal, FiniteDistribution) else list(range(q.size))
    return FiniteDistribution(list(support), tilted / tilted.sum())


@dataclass(frozen=True)
class CovarianceIdentity:
    lhs: float
    rhs: float
    cov: float

    @property
    def reduces(self):
        """Whether the potential strictly lowers the chi-square divergence."""
        return self.cov > 0


def covariance_identity(proposal, ratio, psi):
    """Evaluate both sides of the chi-square/covariance identity.

    ``lhs = 1 + chi^2(pi || q_psi)`` with ``pi = ratio * q`` and ``q_psi`` the
    tilted proposal; ``rhs = E_q[r^2] - Cov_q(psi, r^2 / psi)``.
    """
    q = proposal.probs if isinstance(proposal, FiniteDistribution) else np.asarray(proposal, dtype=float)
    r = np.asarray(ratio, dtype=float)
    psi = np.asarray(psi, dtype=float)
    target = r * q
    tilted = effective_proposal(q, psi)
    lhs = 1.0 + chi_square(target, tilted.probs)
    w = r**2 / psi
    cov = float(np.sum(q * (psi - np.sum(q * psi)) * (w - np.sum(q * w))))
    rhs = float(np.sum(q * r**2)) - cov
    return CovarianceIdentity(lhs, rhs, cov)


def _token_tree(model, state, n_tokens, transform=None):
    """Per-level next-token log-probabilities for every prefix.

    Level ``t`` is an array of shape (V^t, V); prefix ``i`` at level ``t``
    extended by token ``v`` has index ``i * V + v`` at level ``t + 1``.
    """
    vocab = model.vocab_size
    if isinstance(model, TabularModel):
        states = np.array([state], dtype=np.int64)
    else:
        states = np.empty(1, dtype=object)
        states[0] = state
    levels = []
    for t in range(n_tokens):
        lp = np.asarray(model.next_logprobs_batch(states), dtype=float)
        levels.append(lp if transform is None else transform(lp))
        if t + 1 < n_tokens:
            parents = np.repeat(states, vocab)
            tokens = np.tile(np.arange(vocab), len(states))
            states = model.advance_batch(parents, tokens)
    return levels


def _forward(levels, scale=1.0):
    acc = np.zeros(1)
    out = [acc]
    for lp in levels:
        acc = (acc[:, None] + scale * lp).ravel()
        out.append(acc)
    return out


def _check_size(vocab, n_tokens, cap):
    if vocab**n_tokens > cap:
        raise EnumerationSizeError(f"V^(J*B) = {vocab}^{n_tokens} exceeds enumeration cap {cap}")


@dataclass
class OracleTables:
    """Exact power-target tables on ``J`` blocks of ``B`` tokens.

    Per-level arrays are indexed by the base-V code of the prefix tokens.
    Level ``j`` holds prefixes of ``j`` blocks (``j * B`` tokens).
    """

    alpha: float
    n_blocks: int
    block_size: int
    vocab_size: int
    log_gamma: list
    log_suffix: list
    log_marginal: list
    log_Z: float
    token_logp: list

    @property
    def n_tokens(self):
        return self.n_blocks * self.block_size

    def index(self, prefix):
        prefix = tuple(int(t) for t in prefix)
        if len(prefix) % self.block_size or len(prefix) > self.n_tokens:
            raise KeyError(f"prefix length {len(prefix)} is not a block boundary of this table")
        idx = 0
        for t in prefix:
            if not 0 <= t < self.vocab_size:
                raise KeyError(f"token {t} outside vocabulary")
            idx = idx * self.vocab_size + t
        return len(prefix) // self.block_size, idx

    def gamma(self, prefix):
        j, i = self.index(prefix)
        return float(np.exp(self.log_gamma[j][i]))

    def suffix_value(self, prefix):
        j, i = self.index(prefix)
        return float(np.exp(self.log_suffix[j][i]))

    def prefix_marginal(self, prefix):
        j, i = self.index(prefix)
        return float(np.exp(self.log_marginal[j][i]))

    @property
    def Z(self):
        return float(np.exp(self.log_Z))

    def block_outcomes(self):
        return [tuple(int(x) for x in np.unravel_index(c, (self.vocab_size,) * self.block_size))
                for c in range(self.vocab_size**self.block_size)]

    def block_log_power(self, prefix):
        """alpha * log p(block | prefix) for every next block, in code order."""
        j, i = self.index(prefix)
        if j >= self.n_blocks:
            raise KeyError("prefix already spans the full horizon")
        V = self.vocab_size
        acc = np.zeros(1)
        idx = np.array([i])
        for t in range(self.block_size):
            lp = self.token_logp[j * self.block_size + t][idx]
            acc = (acc[:, None] + self.alpha * lp).ravel()
            idx = (idx[:, None] * V + np.arange(V)).ravel()
        return acc, idx

    def sequence_distribution(self):
        """The normalised power target over full sequences."""
        lg = self.log_gamma[-1]
        seqs = [tuple(int(x) for x in np.unravel_index(c, (self.vocab_size,) * self.n_tokens))
                for c in range(lg.size)]
        return FiniteDistribution(seqs, np.exp(lg - self.log_Z))

    def block_marginal(self, j):
        """Marginal law of block ``j`` (1-based) under the full target."""
        if not 1 <= j <= self.n_blocks:
            raise KeyError(f"block index {j} outside 1..{self.n_blocks}")
        nb = self.vocab_size**self.block_size
        p = np.exp(self.log_gamma[-1] - self.log_Z).reshape(
            nb ** (j - 1), nb, nb ** (self.n_blocks - j)
        ).sum(axis=(0, 2))
        return FiniteDistribution(self.block_outcomes(), p / p.sum())

    def to_dict(self):
        levels = []
        for j in range(self.n_blocks + 1):
            n = j * self.block_size
            entries = []
            for i in range(self.log_gamma[j].size):
                prefix = [int(x) for x in np.unravel_index(i, (self.vocab_size,) * n)] if n else []
                entries.append({
                    "prefix": prefix,
                    "log_gamma": float(self.log_gamma[j][i]),
                    "log_suffix_value": float(self.log_suffix[j][i]),
                    "prefix_marginal": float(np.exp(self.log_marginal[j][i])),
                })
            levels.append(entries)
        return {
            "alpha": self.alpha,
            "n_blocks": self.n_blocks,
            "block_size": self.block_size,
            "vocab_size": self.vocab_size,
            "log_Z": float(self.log_Z),
            "levels": levels,
        }

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), allow_nan=True, **kwargs)


def enumerate_power_target(model, prompt_state=None, n_blocks=1, block_size=1, alpha=4.0,
                           cap=DEFAULT_ENUMERATION_CAP):
    """Enumerate the power target ``p(b_{1:J})^alpha`` exactly."""
    if alpha <= 0:
        raise InputError("alpha must be positive")
    if n_blocks < 1 or block_size < 1:
        raise InputError("n_blocks and block_size must be >= 1")
    state = model.initial_state() if prompt_state is None else prompt_state
    T = n_blocks * block_size
    V = model.vocab_size
    _check_size(V, T, cap)
    levels = _token_tree(model, state, T)

    log_gamma_tok = _forward(levels, alpha)
    with np.errstate(invalid="ignore"):
        log_Z = float(logsumexp(log_gamma_tok[-1]))

    # backward recursion for suffix values
    lz = np.zeros(V**T)
    log_suffix_tok = [lz]
    for lp in reversed(levels):
        lz = logsumexp(alpha * lp + lz.reshape(-1, V), axis=1)
        log_suffix_tok.append(lz)
    log_suffix_tok.reverse()

    log_pi = log_gamma_tok[-1] - log_Z
    log_gamma, log_suffix, log_marginal = [], [], []
    for j in range(n_blocks + 1):
        n = j * block_size
        log_gamma.append(log_gamma_tok[n])
        log_suffix.append(log_suffix_tok[n])
        log_marginal.append(logsumexp(log_pi.reshape(V**n, V ** (T - n)), axis=1))
    return OracleTables(alpha, n_blocks, block_size, V, log_gamma, log_suffix, log_marginal, log_Z, levels)


def next_block_conditional(tables, prefix):
    """Exact law of the next block given a block-aligned prefix."""
    j, i = tables.index(prefix)
    if j >= tables.n_blocks:
        raise KeyError("prefix already spans the full horizon")
    log_pow, children = tables.block_log_power(prefix)
    logits = log_pow + tables.log_suffix[j + 1][children] - tables.log_suffix[j][i]
    probs = np.exp(logits)
    return FiniteDistribution(tables.block_outcomes(), probs / probs.sum())


def enumerate_proposal(model, prompt_state=None, n_blocks=1, block_size=1, proposal=None,
                       cap=DEFAULT_ENUMERATION_CAP):
    """log q over every full sequence under the tempered/truncated proposal."""
    state = model.initial_state() if prompt_state is None else prompt_state
    T = n_blocks * block_size
    _check_size(model.vocab_size, T, cap)
    levels = _token_tree(model, state, T, transform=lambda lp: proposal_logprobs(lp, proposal))
    return _forward(levels)[-1]


def truncated_suffix_value(model, state, n_tokens, alpha):
    """log of the power mass of all ``n_tokens``-token continuations of ``state``."""
    if n_tokens <= 0:
        return 0.0
    if isinstance(model, TabularModel):
        lz = np.zeros(model.n_states)
        for _ in range(n_tokens):
            lz = logsumexp(alpha * model.logprobs + lz[model.transitions], axis=1)
        return float(lz[state])
    _check_size(model.vocab_size, n_tokens, DEFAULT_ENUMERATION_CAP)
    levels = _token_tree(model, state, n_tokens)
    return float(logsumexp(_forward(levels, alpha)[-1]))


def sequence_index(tokens, vocab):
    idx = 0
    for t in tokens:
        idx = idx * vocab + int(t)
    return idx
