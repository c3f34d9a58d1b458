"""Autoregressive model abstraction and exactly enumerable toy models.

Models expose single-state methods (``next_logprobs``, ``advance``,
``features``) plus batched variants that the sampler uses on whole
populations.  Toy models are finite state machines over integer state ids,
so every batched call is a table lookup.
"""

from dataclasses import asdict, dataclass, field
import itertools

import numpy as np
from scipy.special import logsumexp

from .exceptions import ConfigurationError, InputError

MODEL_KINDS = ("markov", "random-logit", "planted-mode")


class AutoregressiveModel:
    """Interface for next-token models driven by the sampler.

    Subclasses implement ``initial_state``, ``next_logprobs``, ``advance``,
    ``features`` and ``is_terminal``.  The batched methods loop over the
    single-state ones by default and may be overridden for speed.
    """

    vocab_size: int
    eos: int | None = None
    feature_dim: int

    def initial_state(self):
        raise NotImplementedError

    def next_logprobs(self, state):
        raise NotImplementedError

    def advance(self, state, token):
        raise NotImplementedError

    def features(self, state):
        raise NotImplementedError

    def is_terminal(self, state):
        return False

    def next_logprobs_batch(self, states):
        return np.stack([self.next_logprobs(s) for s in states]) if len(states) else np.empty((0, self.vocab_size))

    def advance_batch(self, states, tokens):
        out = np.empty(len(states), dtype=object)
        for i, (s, t) in enumerate(zip(states, tokens)):
            out[i] = self.advance(s, int(t))
        return out

    def features_batch(self, states):
        if not len(states):
            return np.empty((0, self.feature_dim))
        return np.stack([self.features(s) for s in states])

    def terminal_batch(self, states):
        return np.array([self.is_terminal(s) for s in states], dtype=bool)

    def initial_states(self, n, prompt=()):
        state = self.encode_prompt(prompt)
        out = np.empty(n, dtype=object)
        for i in range(n):
            out[i] = state
        return out

    def encode_prompt(self, prompt=()):
        state = self.initial_state()
        for tok in prompt or ():
            state = self.advance(state, int(tok))
        return state

    def sequence_logprob(self, tokens, state=None):
        """Base-model log-probability of ``tokens`` continuing ``state``."""
        state = self.initial_state() if state is None else state
        total = 0.0
        for tok in tokens:
            total += float(self.next_logprobs(state)[int(tok)])
            state = self.advance(state, int(tok))
        return total


class TabularModel(AutoregressiveModel):
    """Finite-state model defined by lookup tables.

    Parameters
    ----------
    logprobs : ndarray, shape (S, V)
        Next-token log-probabilities for each state.
    transitions : ndarray of int, shape (S, V)
        Successor state for each (state, token).
    feature_table : ndarray, shape (S, d)
    initial : int
        Initial state id.
    terminal : ndarray of bool, shape (S,), optional
    eos : int, optional
    labels : list, optional
        Human-readable description of each state.
    """

    def __init__(self, logprobs, transitions, feature_table, initial=0, terminal=None, eos=None, labels=None):
        self.logprobs = np.asarray(logprobs, dtype=float)
        self.transitions = np.asarray(transitions, dtype=np.int64)
        self.feature_table = np.asarray(feature_table, dtype=float)
        n_states, vocab = self.logprobs.shape
        if self.transitions.shape != (n_states, vocab):
            raise ConfigurationError("transition table shape must match log-probability table")
        if self.transitions.min() < 0 or self.transitions.max() >= n_states:
            raise ConfigurationError("transition table references unknown states")
        norm = logsumexp(self.logprobs, axis=1)
        if not np.allclose(norm, 0.0, atol=1e-12):
            raise ConfigurationError("every state must carry a normalised next-token distribution")
        self.vocab_size = vocab
        self.feature_dim = self.feature_table.shape[1]
        self.initial = int(initial)
        self.terminal = np.zeros(n_states, dtype=bool) if terminal is None else np.asarray(terminal, dtype=bool)
        self.eos = eos
        self.labels = labels
        self.spec = None

    @property
    def n_states(self):
        return self.logprobs.shape[0]

    def initial_state(self):
        return self.initial

    def _check_token(self, token):
        if not 0 <= token < self.vocab_size:
            raise InputError(f"token {token} outside vocabulary of size {self.vocab_size}")

    def next_logprobs(self, state):
        return self.logprobs[state].copy()

    def advance(self, state, token):
        self._check_token(int(token))
        return int(self.transitions[state, token])

    def features(self, state):
        return self.feature_table[state].copy()

    def is_terminal(self, state):
        return bool(self.terminal[state])

    def next_logprobs_batch(self, states):
        return self.logprobs[np.asarray(states, dtype=np.int64)]

    def advance_batch(self, states, tokens):
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.vocab_size):
            raise InputError("token outside vocabulary")
        return self.transitions[np.asarray(states, dtype=np.int64), tokens]

    def features_batch(self, states):
        return self.feature_table[np.asarray(states, dtype=np.int64)]

    def terminal_batch(self, states):
        return self.terminal[np.asarray(states, dtype=np.int64)]

    def initial_states(self, n, prompt=()):
        return np.full(n, self.encode_prompt(prompt), dtype=np.int64)

    def describe_state(self, state):
        return self.labels[state] if self.labels is not None else state


@dataclass
class ToyModelSpec:
    """Serializable description of a toy model.

    ``markov`` uses uniform rows unless ``table`` is given; ``random-logit``
    draws Gaussian logits from ``seed``; ``planted-mode`` builds a
    fixed-horizon instance with a low-probability trap token whose subtree
    holds a high-probability suffix.
    """

    kind: str = "markov"
    vocab: int = 2
    seed: int = 0
    order: int = 1
    trap_token: int = 0
    trap_prob: float = 0.1
    mode_prob: float = 0.9
    depth: int = 4
    attract_token: int = 1
    attract_prob: float | None = None
    eos: int | None = None
    logit_scale: float = 2.0
    table: list | None = field(default=None, repr=False)

    def to_dict(self):
        d = asdict(self)
        return {k: v for k, v in d.items() if v is not None}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)

    def validate(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigurationError(f"kind must be one of {MODEL_KINDS}, got {self.kind!r}")
        if not isinstance(self.vocab, int) or self.vocab < 2:
            raise ConfigurationError("vocab must be an integer >= 2")
        if self.order < 1:
            raise ConfigurationError("order must be >= 1")
        if self.eos is not None and not 0 <= self.eos < self.vocab:
            raise ConfigurationError("eos must be a vocabulary token")
        if self.kind == "planted-mode":
            if self.depth < 1:
                raise ConfigurationError("planted-mode depth must be >= 1")
            if self.eos is not None:
                raise ConfigurationError("planted-mode models are fixed-horizon and take no eos")
            if self.trap_token == self.attract_token:
                raise ConfigurationError("trap and attractive tokens must differ")
            for name in ("trap_token", "attract_token"):
                if not 0 <= getattr(self, name) < self.vocab:
                    raise ConfigurationError(f"{name} outside vocabulary")
            if not 0 < self.trap_prob < 1 or not 0 < self.mode_prob <= 1:
                raise ConfigurationError("trap_prob must lie in (0,1) and mode_prob in (0,1]")
            attract = self.resolved_attract_prob()
            if not 0 < attract or self.trap_prob + attract > 1 + 1e-12:
                raise ConfigurationError("trap_prob + attract_prob must not exceed 1")
            if self.vocab == 2 and abs(self.trap_prob + attract - 1) > 1e-12:
                raise ConfigurationError("with vocab=2, attract_prob must equal 1 - trap_prob")
        return self

    def resolved_attract_prob(self):
        if self.attract_prob is not None:
            return self.attract_prob
        rest = 1.0 - self.trap_prob
        return rest if self.vocab == 2 else rest * 2.0 / 3.0


def _window_index(window, vocab):
    # windows hold tokens in [-1, V) where -1 pads the start
    idx = 0
    for t in window:
        idx = idx * (vocab + 1) + (t + 1)
    return idx


def _markov_model(logits_for_window, vocab, order, eos):
    windows = list(itertools.product(range(-1, vocab), repeat=order))
    n_win = len(windows)
    terminal_id = n_win
    n_states = n_win + (1 if eos is not None else 0)
    logprobs = np.empty((n_states, vocab))
    trans = np.empty((n_states, vocab), dtype=np.int64)
    feats = np.zeros((n_states, order * vocab))
    for w in windows:
        s = _window_index(w, vocab)
        row = np.asarray(logits_for_window(w), dtype=float)
        logprobs[s] = row - logsumexp(row)
        for v in range(vocab):
            trans[s, v] = terminal_id if v == eos else _window_index(w[1:] + (v,), vocab)
        for k, t in enumerate(w):
            if t >= 0:
                feats[s, k * vocab + t] = 1.0
    labels = [("window", w) for w in windows]
    terminal = np.zeros(n_states, dtype=bool)
    if eos is not None:
        logprobs[terminal_id] = -np.inf
        logprobs[terminal_id, eos] = 0.0
        trans[terminal_id] = terminal_id
        feats[terminal_id, (order - 1) * vocab + eos] = 1.0
        terminal[terminal_id] = True
        labels.append(("terminal",))
    initial = _window_index((-1,) * order, vocab)
    return TabularModel(logprobs, trans, feats, initial=initial, terminal=terminal, eos=eos, labels=labels)


_ROOT, _TRAP, _DIFFUSE = 0, 1, 2


def _planted_model(spec):
    vocab, depth = spec.vocab, spec.depth
    horizon = depth + 1
    attract = spec.resolved_attract_prob()
    root = np.full(vocab, (1.0 - spec.trap_prob - attract) / max(vocab - 2, 1))
    root[spec.trap_token] = spec.trap_prob
    root[spec.attract_token] = attract
    mode = np.full(vocab, (1.0 - spec.mode_prob) / (vocab - 1))
    mode[spec.trap_token] = spec.mode_prob
    diffuse = np.full(vocab, 1.0 / vocab)
    with np.errstate(divide="ignore"):
        rows = {_ROOT: np.log(root), _TRAP: np.log(mode), _DIFFUSE: np.log(diffuse)}

    # state = (position capped at horizon, branch)
    states = [(0, _ROOT)] + [(pos, br) for pos in range(1, horizon + 1) for br in (_TRAP, _DIFFUSE)]
    index = {s: i for i, s in enumerate(states)}
    n = len(states)
    logprobs = np.empty((n, vocab))
    trans = np.empty((n, vocab), dtype=np.int64)
    feats = np.zeros((n, 4))
    for (pos, br), i in index.items():
        logprobs[i] = rows[br]
        nxt = min(pos + 1, horizon)
        for v in range(vocab):
            if br == _ROOT:
                child = _TRAP if v == spec.trap_token else _DIFFUSE
            else:
                child = br
            trans[i, v] = index[(nxt, child)]
        feats[i, br] = 1.0
        feats[i, 3] = pos / horizon
    labels = [("pos", p, ("root", "trap", "diffuse")[b]) for p, b in states]
    model = TabularModel(logprobs, trans, feats, initial=0, labels=labels)
    model.horizon = horizon
    model.trap_token = spec.trap_token
    model.attract_token = spec.attract_token
    return model


def build_model(spec):
    """Construct a toy model from a :class:`ToyModelSpec` (or mapping)."""
    if isinstance(spec, dict):
        spec = ToyModelSpec.from_dict(spec)
    spec.validate()
    if spec.kind == "markov":
        if spec.table is None:
            model = _markov_model(lambda w: np.zeros(spec.vocab), spec.vocab, spec.order, spec.eos)
        else:
            table = np.asarray(spec.table, dtype=float)
            n_win = (spec.vocab + 1) ** spec.order
            if table.shape != (n_win, spec.vocab) or (table < 0).any():
                raise ConfigurationError(f"markov table must have shape ({n_win}, {spec.vocab}) and be non-negative")
            with np.errstate(divide="ignore"):
                logt = np.log(table)
            model = _markov_model(lambda w: logt[_window_index(w, spec.vocab)], spec.vocab, spec.order, spec.eos)
    elif spec.kind == "random-logit":
        n_win = (spec.vocab + 1) ** spec.order
        logits = np.random.default_rng(spec.seed).normal(0.0, spec.logit_scale, size=(n_win, spec.vocab))
        model = _markov_model(lambda w: logits[_window_index(w, spec.vocab)], spec.vocab, spec.order, spec.eos)
    else:
        model = _planted_model(spec)
    model.spec = spec
    return model
