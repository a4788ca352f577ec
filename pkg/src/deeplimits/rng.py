"""Counter-based random streams.

Every stochastic routine takes an ``np.random.Generator``; the harness builds
them here from a logged integer seed so that trials get independent streams.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def spawn(seed, count):
    """``count`` independent generators derived from one seed."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [np.random.Generator(np.random.Philox(c)) for c in children]
