"""Counter-based pseudo-random streams.

Every stochastic operation in this package draws from a SplitMix64 stream,
so a run is reproducible from its integer seed alone and the exact bit
streams can be rebuilt in any language from the constants below.

Output ``i`` (0-based) of the stream with seed ``s`` is::

    mix64((s + (i + 1) * GAMMA) mod 2**64)

with ``GAMMA = 0x9E3779B97F4A7C15`` and ``mix64`` the SplitMix64 finalizer::

    z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9
    z ^= z >> 27;  z *= 0x94D049BB133111EB
    z ^= z >> 31

(all arithmetic mod 2**64).  Derived quantities, in consumption order:

* uniform doubles in [0, 1): ``(u64 >> 11) * 2**-53`` (one u64 each);
* normal deviates: Box-Muller on consecutive uniform pairs ``(u1, u2)``:
  ``r = sqrt(-2 log(1 - u1))``, ``z0 = r cos(2 pi u2)``,
  ``z1 = r sin(2 pi u2)``, emitted interleaved ``z0, z1`` (``normal(n)``
  consumes ``2 * ceil(n / 2)`` u64s);
* permutations: the indices that stable-sort the next ``n`` u64 outputs
  ascending (ties are broken by index and occur with probability ~n^2/2**64).

Integer outputs are bit-exact everywhere; the float derivations are exact up
to the platform libm's rounding of log/sqrt/sin/cos.
"""

from __future__ import annotations

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_MASK = (1 << 64) - 1


def _mix64(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


def derive(seed: int, *tags: int) -> int:
    """Derive a child seed by absorbing each tag with one SplitMix64 round.

    Used to split one run seed into independent substreams:
    ``derive(seed, t, purpose)`` for iteration t, and so on.
    """
    s = seed & _MASK
    for t in tags:
        s = _mix64((s ^ (t & _MASK)) + GAMMA)
    return s


class Stream:
    """A seeded SplitMix64 stream with a running counter.

    Instances are cheap; create one per logical use (one per epoch shuffle,
    one per model init) via :func:`derive` rather than sharing.
    """

    def __init__(self, seed: int):
        self.seed = seed & _MASK
        self.counter = 0

    def u64(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit outputs."""
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        z = (np.uint64(self.seed) + idx * np.uint64(GAMMA)).astype(np.uint64)
        z ^= z >> np.uint64(30)
        z *= np.uint64(_MIX1)
        z ^= z >> np.uint64(27)
        z *= np.uint64(_MIX2)
        z ^= z >> np.uint64(31)
        return z

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) with 53-bit mantissas."""
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * (2.0**-53)

    def normal(self, n: int) -> np.ndarray:
        """``n`` standard normal deviates (Box-Muller)."""
        m = (n + 1) // 2
        u1 = self.uniform(m)
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log1p(-u1))
        theta = (2.0 * np.pi) * u2
        out = np.empty(2 * m, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def permutation(self, n: int) -> np.ndarray:
        """A permutation of ``range(n)`` as int64 indices."""
        return np.argsort(self.u64(n), kind="stable")
