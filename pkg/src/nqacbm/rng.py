"""Deterministic random-number plumbing.

Every stochastic operation in the package takes an explicit 64-bit seed and
derives its streams through one of two counter-based schemes:

* ``spawn(seed, *lane)`` -- a numpy Generator backed by Philox, keyed by the
  seed plus a named lane (strings or integers). Independent lanes give
  independent streams, so results never depend on call order or worker count.
* ``splitmix64`` / ``hash_words`` -- a stateless integer hash used to build
  per-(read, sweep, site) uniforms inside compiled sampler kernels. The pure
  Python versions here are the reference; the kernels inline the same
  arithmetic and the test suite cross-checks the two.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def splitmix64(z: int) -> int:
    """One splitmix64 mixing step (Steele et al.), on plain Python ints."""
    z = (z + _GAMMA) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return (z ^ (z >> 31)) & _MASK


def _lane_word(part) -> int:
    if isinstance(part, str):
        # stable 64-bit digest of the lane name
        w = 0
        for ch in part.encode("utf-8"):
            w = splitmix64((w + ch) & _MASK)
        return w
    if isinstance(part, (int, np.integer)):
        return int(part) & _MASK
    raise TypeError(f"lane parts must be str or int, got {type(part).__name__}")


def hash_words(*words) -> int:
    """Fold any number of ints/strings into one 64-bit value."""
    h = 0
    for w in words:
        h = splitmix64((h + _lane_word(w)) & _MASK)
    return h


def spawn(seed: int, *lane) -> np.random.Generator:
    """Generator for the stream named by (seed, *lane).

    The Philox key is derived from the seed and the lane, so any two distinct
    lanes are statistically independent and reproducible.
    """
    h = hash_words(int(seed) & _MASK, *lane)
    key = []
    for _ in range(2):
        h = splitmix64(h)
        key.append(h)
    return np.random.Generator(np.random.Philox(key=np.array(key, dtype=np.uint64)))


def uniform_from_hash(h: int) -> float:
    """Map a 64-bit hash to a uniform in (0, 1].

    The open-at-zero convention matters: Metropolis accepts when u < p, and a
    u of exactly 0.0 would accept moves of vanishing probability. Kernels use
    the same mapping.
    """
    return ((h >> 11) + 1) * (2.0 ** -53)
