"""Counter-based random streams (Philox4x32-10).

Every random number used by the sampler is a pure function of
``(seed, purpose, boundary, slot, step, sub)``.  Two runs with the same seed
therefore draw identical numbers no matter how particles are batched or
which worker evaluates them.
"""

import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)

# Purpose tags occupy the top byte of the first counter word.
PROPOSE = 1
RESAMPLE = 2
ROLLOUT = 3
FINALIZE = 4
BASELINE = 5
POTENTIAL = 6
SHUFFLE = 7

_BOUNDARY_LIMIT = 1 << 24


def philox4x32(counter, key, rounds=10):
    """Vectorised Philox4x32 block function.

    Parameters
    ----------
    counter : array_like of uint32, shape (n, 4)
    key : array_like of uint32, shape (2,)

    Returns
    -------
    ndarray of uint32, shape (n, 4)
    """
    ctr = np.asarray(counter, dtype=np.uint64).reshape(-1, 4) & _MASK32
    c0, c1, c2, c3 = (ctr[:, i].copy() for i in range(4))
    k0 = np.uint64(int(key[0]) & 0xFFFFFFFF)
    k1 = np.uint64(int(key[1]) & 0xFFFFFFFF)
    for r in range(rounds):
        if r:
            k0 = (k0 + _W0) & _MASK32
            k1 = (k1 + _W1) & _MASK32
        p0 = c0 * _M0
        p1 = c2 * _M1
        hi0, lo0 = p0 >> _SHIFT32, p0 & _MASK32
        hi1, lo1 = p1 >> _SHIFT32, p1 & _MASK32
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return np.stack([c0, c1, c2, c3], axis=1).astype(np.uint32)


def _words_to_unit(hi, lo):
    # 53-bit mantissa, strictly inside (0, 1)
    bits = ((hi.astype(np.uint64) << np.uint64(21)) ^ (lo.astype(np.uint64) >> np.uint64(11))) & np.uint64(
        (1 << 53) - 1
    )
    return (bits.astype(np.float64) + 0.5) / float(1 << 53)


class CounterRNG:
    """Keyed Philox generator addressed by structured counters.

    ``uniform(purpose, boundary, slots, step, sub)`` returns one uniform per
    entry of the broadcast ``(slots, step, sub)`` arrays.
    """

    def __init__(self, seed):
        seed = int(seed)
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = seed
        self._key = (seed & 0xFFFFFFFF, (seed >> 32) & 0xFFFFFFFF)

    def __repr__(self):
        return f"CounterRNG(seed={self.seed})"

    def raw(self, purpose, boundary, slots, step=0, sub=0):
        slots, step, sub = np.broadcast_arrays(
            np.asarray(slots, dtype=np.int64), np.asarray(step, dtype=np.int64), np.asarray(sub, dtype=np.int64)
        )
        if not 0 <= boundary < _BOUNDARY_LIMIT:
            raise ValueError(f"boundary index {boundary} out of range")
        shape = slots.shape
        ctr = np.empty((slots.size, 4), dtype=np.uint64)
        ctr[:, 0] = (int(purpose) << 24) | int(boundary)
        ctr[:, 1] = slots.ravel().astype(np.uint64)
        ctr[:, 2] = step.ravel().astype(np.uint64)
        ctr[:, 3] = sub.ravel().astype(np.uint64)
        return philox4x32(ctr, self._key).reshape(shape + (4,))

    def uniform(self, purpose, boundary, slots, step=0, sub=0):
        words = self.raw(purpose, boundary, slots, step, sub)
        return _words_to_unit(words[..., 0], words[..., 1])

    def normal(self, purpose, boundary, slots, step=0, sub=0):
        """Standard normals via Box-Muller on one counter block per draw."""
        words = self.raw(purpose, boundary, slots, step, sub)
        u1 = _words_to_unit(words[..., 0], words[..., 1])
        u2 = _words_to_unit(words[..., 2], words[..., 3])
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

    def stream(self, purpose, boundary):
        return Stream(self, purpose, boundary)

    def spawn(self, offset):
        """Generator for an independent repetition (``seed + offset``)."""
        return CounterRNG(self.seed + int(offset))


class Stream:
    """A ``CounterRNG`` pinned to one ``(purpose, boundary)`` pair."""

    def __init__(self, rng, purpose, boundary):
        self.rng = rng
        self.purpose = purpose
        self.boundary = boundary

    def uniform(self, n=None, slots=None, step=0, sub=0):
        if slots is None:
            slots = np.arange(1 if n is None else n)
        out = self.rng.uniform(self.purpose, self.boundary, slots, step, sub)
        return out[0] if n is None and np.ndim(out) == 1 and out.size == 1 else out


def as_counter_rng(rng):
    if isinstance(rng, CounterRNG):
        return rng
    if rng is None:
        return CounterRNG(0)
    return CounterRNG(int(rng))
