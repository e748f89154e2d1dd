"""Random stream derivation.

Two flavours of randomness are used in the package:

* ``numpy.random.Generator`` streams for Python-level sampling, derived from a
  master seed and a tuple of integer ids through ``SeedSequence`` spawn keys.
* 64-bit keys for the JIT kernels.  Inside those kernels randomness is a pure
  function of ``(key, counter)`` (splitmix64 finalizer), which lets a lattice
  environment be generated lazily, site by site, in any order.

Both are functions of the ids only, never of scheduling, so results do not
depend on the number of workers.
"""

from __future__ import annotations

import numpy as np
from numba import njit

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0


def stream(seed: int, *ids: int) -> np.random.Generator:
    """Independent generator for ``(seed, *ids)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(i) for i in ids))
    return np.random.Generator(np.random.PCG64(ss))


def root_key(seed: int, *ids: int) -> np.uint64:
    """64-bit key for the JIT kernels derived from ``(seed, *ids)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(i) for i in ids))
    return ss.generate_state(1, dtype=np.uint64)[0]


def key_from_generator(rng: np.random.Generator) -> np.uint64:
    """Draw a kernel key from an existing generator (consumes one draw)."""
    return np.uint64(rng.integers(0, 2**64, dtype=np.uint64))


@njit(cache=True, inline="always")
def mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(cache=True, inline="always")
def combine(h, v):
    """Fold the integer ``v`` into hash state ``h``."""
    return mix64(h ^ (np.uint64(v) * GOLDEN + _M2))


@njit(cache=True, inline="always")
def to_unit(z):
    """Map 64 random bits to a double in [0, 1)."""
    return float(z >> _S11) * _INV53


@njit(cache=True, inline="always")
def next_u64(state):
    """Sequential splitmix64 stream; ``state`` is a length-1 uint64 array."""
    state[0] = state[0] + GOLDEN
    return mix64(state[0])


@njit(cache=True, inline="always")
def next_uniform(state):
    return to_unit(next_u64(state))


@njit(cache=True, inline="always")
def next_exponential(state, rate):
    u = next_uniform(state)
    return -np.log1p(-u) / rate


@njit(cache=True)
def derive(key, a, b):
    return combine(combine(key, a), b)
