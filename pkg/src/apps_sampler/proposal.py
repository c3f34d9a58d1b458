"""Tempered and truncated block proposals."""

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .exceptions import ConfigurationError


@dataclass(frozen=True)
class ProposalConfig:
    """Local proposal ``q``: temperature plus optional top-k / nucleus truncation.

    The truncated distribution is renormalised, so ``log q`` is always the
    log of a proper distribution over the vocabulary.
    """

    temperature: float = 0.25
    top_k: int | None = None
    top_p: float | None = None

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigurationError("temperature must be positive")
        if self.top_k is not None and (not isinstance(self.top_k, int) or self.top_k < 1):
            raise ConfigurationError("top_k must be a positive integer")
        if self.top_p is not None and not 0 < self.top_p <= 1:
            raise ConfigurationError("top_p must lie in (0, 1]")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def proposal_logprobs(logp, config):
    """Map base log-probabilities (n, V) to proposal log-probabilities (n, V)."""
    logp = np.atleast_2d(np.asarray(logp, dtype=float))
    with np.errstate(invalid="ignore"):
        scores = logp / config.temperature
    scores = np.where(np.isneginf(logp), -np.inf, scores)
    n, vocab = scores.shape
    if config.top_k is not None and config.top_k < vocab:
        # stable sort keeps the lowest token ids among ties
        order = np.argsort(-scores, axis=1, kind="stable")
        drop = order[:, config.top_k:]
        scores = scores.copy()
        np.put_along_axis(scores, drop, -np.inf, axis=1)
    scores = scores - logsumexp(scores, axis=1, keepdims=True)
    if config.top_p is not None and config.top_p < 1:
        order = np.argsort(-scores, axis=1, kind="stable")
        sorted_p = np.exp(np.take_along_axis(scores, order, axis=1))
        before = np.cumsum(sorted_p, axis=1) - sorted_p
        # keep the smallest prefix whose mass reaches top_p
        drop_sorted = before >= config.top_p
        drop_sorted[:, 0] = False
        scores = scores.copy()
        rows = np.nonzero(drop_sorted)
        scores[rows[0], order[rows]] = -np.inf
        scores = scores - logsumexp(scores, axis=1, keepdims=True)
    return scores


def sample_tokens(logq, u):
    """Inverse-CDF draw of one token per row of ``logq`` given uniforms ``u``."""
    probs = np.exp(logq)
    cdf = np.cumsum(probs, axis=1)
    target = u * cdf[:, -1]
    tokens = (cdf < target[:, None]).sum(axis=1)
    return np.minimum(tokens, logq.shape[1] - 1)


def sample_paths(model, states, lengths, n_steps, proposal, rng, purpose, boundary, slots, sub=0,
                 max_length=None, record=True):
    """Advance each state by up to ``n_steps`` tokens drawn from the proposal.

    Paths stop early at a terminal state or once ``lengths`` reaches
    ``max_length``.  Uniforms are addressed by ``(purpose, boundary, slot,
    step, sub)``, so each row is reproducible on its own.

    Returns
    -------
    tokens : ndarray (n, n_steps), -1 where no token was emitted
    states : ndarray (n,)
    log_p, log_q : ndarray (n,)
        Summed base and proposal log-probabilities of the emitted tokens.
    """
    n = len(states)
    states = states.copy()
    lengths = np.asarray(lengths, dtype=np.int64).copy()
    slots = np.broadcast_to(np.asarray(slots, dtype=np.int64), (n,))
    sub = np.broadcast_to(np.asarray(sub, dtype=np.int64), (n,))
    tokens = np.full((n, n_steps), -1, dtype=np.int64) if record else None
    log_p = np.zeros(n)
    log_q = np.zeros(n)
    limit = np.iinfo(np.int64).max if max_length is None else max_length
    active = ~model.terminal_batch(states) & (lengths < limit)
    for t in range(n_steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        lp = np.asarray(model.next_logprobs_batch(states[idx]), dtype=float)
        lq = proposal_logprobs(lp, proposal)
        u = rng.uniform(purpose, boundary, slots[idx], t, sub[idx])
        tok = sample_tokens(lq, u)
        rows = np.arange(idx.size)
        log_p[idx] += lp[rows, tok]
        log_q[idx] += lq[rows, tok]
        if record:
            tokens[idx, t] = tok
        states[idx] = model.advance_batch(states[idx], tok)
        lengths[idx] += 1
        active[idx] = ~model.terminal_batch(states[idx]) & (lengths[idx] < limit)
    return tokens, states, log_p, log_q, lengths
