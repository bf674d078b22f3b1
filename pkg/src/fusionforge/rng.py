"""Portable seeded generator: xoshiro256** seeded through splitmix64.

The algorithm is fixed so datasets can be reproduced bit-for-bit by any
implementation:

* ``seed`` (an unsigned 64-bit integer) is expanded into four state words by
  four successive splitmix64 outputs.
* Each draw is one xoshiro256** output ``r``; a uniform double is
  ``(r >> 11) * 2**-53`` in [0, 1).
* A noise draw with exponent ``p`` is ``(-log1p(-u)) ** p`` for such a ``u``.
* ``below(n)`` is ``floor(u * n)``.
"""

import numpy as np

from . import _backend

_MASK = (1 << 64) - 1


def splitmix64(seed):
    """Return four consecutive splitmix64 outputs starting from ``seed``."""
    x = seed & _MASK
    out = []
    for _ in range(4):
        x = (x + 0x9E3779B97F4A7C15) & _MASK
        z = x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        out.append(z ^ (z >> 31))
    return out


class Xoshiro256:
    def __init__(self, seed):
        if not 0 <= int(seed) <= _MASK:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self.state = np.array(splitmix64(self.seed), dtype=np.uint64)

    def uniform(self, n):
        out = np.empty(int(n))
        _backend.xoshiro_uniform(self.state, out)
        return out

    def noise(self, n, power=1.0):
        out = np.empty(int(n))
        _backend.xoshiro_noise(self.state, out, float(power))
        return out

    def below(self, bound, n):
        """``n`` integers uniform on ``[0, bound)``."""
        return np.floor(self.uniform(n) * bound).astype(np.int64)

    def permutation(self, n):
        """Fisher-Yates shuffle of ``range(n)``, drawing from the last index down."""
        perm = np.arange(n)
        u = self.uniform(max(n - 1, 0))
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[k] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm
