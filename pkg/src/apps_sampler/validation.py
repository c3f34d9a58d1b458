"""Input validation helpers used at public entry points."""

import numbers

import numpy as np

from .exceptions import ConfigurationError, DegeneratePopulationError, InputError


def check_log_weights(log_w, name="log_w"):
    """Return ``log_w`` as a 1-D float array with at least one finite entry.

    ``-inf`` entries are allowed (zero weight); ``nan`` and ``+inf`` are not.
    """
    arr = np.asarray(log_w, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise InputError(f"{name} must be a non-empty 1-D array, got shape {arr.shape}")
    if np.isnan(arr).any() or np.isposinf(arr).any():
        raise InputError(f"{name} contains nan or +inf")
    if not np.isfinite(arr).any():
        raise DegeneratePopulationError(f"all entries of {name} are -inf")
    return arr


def check_probabilities(probs, name="probs", atol=1e-12):
    arr = np.asarray(probs, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise InputError(f"{name} must be a non-empty 1-D array")
    if (arr < 0).any() or not np.isfinite(arr).all():
        raise InputError(f"{name} must be finite and non-negative")
    if abs(arr.sum() - 1.0) > atol:
        raise InputError(f"{name} must sum to 1 (got {arr.sum():.15g})")
    return arr


def check_positive(value, name, strict=True, integer=False):
    kind = numbers.Integral if integer else numbers.Real
    if isinstance(value, bool) or not isinstance(value, kind):
        raise ConfigurationError(f"{name} must be {'an integer' if integer else 'a number'}, got {value!r}")
    if (strict and not value > 0) or (not strict and not value >= 0):
        raise ConfigurationError(f"{name} must be {'>' if strict else '>='} 0, got {value!r}")
    return value


def check_choice(value, name, choices):
    if value not in choices:
        raise ConfigurationError(f"{name} must be one of {sorted(choices)}, got {value!r}")
    return value


def check_same_length(a, b, names=("a", "b")):
    if len(a) != len(b):
        raise InputError(f"{names[0]} and {names[1]} differ in length ({len(a)} != {len(b)})")
