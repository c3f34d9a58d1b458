import numpy as np
import pytest

from apps_sampler.lm import ToyModelSpec, build_model

ACCEPTANCE_LINES = {}


@pytest.fixture
def acceptance_log():
    """Record one pass/fail line per acceptance criterion."""

    def log(number, passed, detail):
        ACCEPTANCE_LINES[number] = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {detail}"
        print(ACCEPTANCE_LINES[number])

    return log


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture
def uniform2():
    return build_model(ToyModelSpec(kind="markov", vocab=2))


@pytest.fixture
def planted():
    return build_model(ToyModelSpec(kind="planted-mode", vocab=3, depth=4))


def random_model(seed, vocab=3, order=1, eos=None, scale=1.0):
    return build_model(ToyModelSpec(kind="random-logit", vocab=vocab, seed=seed, order=order, eos=eos, logit_scale=scale))


@pytest.fixture
def rlogit():
    return random_model(0)


def brute_force_sequences(model, n_tokens, state=None):
    """All length-n token tuples with their base log-probabilities, by direct scoring."""
    import itertools

    state = model.initial_state() if state is None else state
    seqs = list(itertools.product(range(model.vocab_size), repeat=n_tokens))
    return seqs, np.array([model.sequence_logprob(s, state) for s in seqs])


def linear_supervision(n_groups, group_size=4, n_features=6, seed=0):
    """Grouped rows whose raw targets are a fixed linear function of the features."""
    from apps_sampler.value_head import SupervisionSet

    rng = np.random.default_rng(seed)
    w = rng.normal(size=n_features)
    X = rng.normal(size=(n_groups * group_size, n_features))
    return SupervisionSet(X, X @ w, np.repeat(np.arange(n_groups), group_size))


def finite_difference_error(fn, params, grads, n_entries, rng, step=1e-5, floor=1e-6):
    """Max relative error of analytic ``grads`` against central differences at random entries."""
    worst = 0.0
    keys = list(params)
    for _ in range(n_entries):
        k = keys[rng.integers(len(keys))]
        flat = params[k].reshape(-1)
        j = rng.integers(flat.size)
        old = flat[j]
        flat[j] = old + step
        up = fn()
        flat[j] = old - step
        down = fn()
        flat[j] = old
        num = (up - down) / (2 * step)
        ana = grads[k].reshape(-1)[j]
        worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), floor))
    return worst
