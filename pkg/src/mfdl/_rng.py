"""Derived random streams.

All stochastic code in the package draws from numpy Generators built out of
``SeedSequence`` keys. Large sample runs are cut into fixed-size shards, each
with its own stream keyed by (seed, shard index), so results are identical
no matter how the shards are distributed over workers.
"""

from __future__ import annotations

import numpy as np

# Fixed shard size for streamed Monte Carlo; must never depend on worker count.
SHARD = 1 << 16


def derived_rng(*key: int) -> np.random.Generator:
    """Generator keyed by a tuple of non-negative integers."""
    return np.random.default_rng(np.random.SeedSequence(list(key)))


def shard_sizes(n: int, shard: int = SHARD):
    """Yield (shard_index, shard_length) covering n samples."""
    idx = 0
    done = 0
    while done < n:
        m = min(shard, n - done)
        yield idx, m
        idx += 1
        done += m
